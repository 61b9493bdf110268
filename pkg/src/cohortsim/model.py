"""Generative trajectory model and individual likelihood computations.

The population follows parallel logistic curves; each individual deforms the
group-average trajectory through a pace of progression alpha = exp(xi), a
time shift tau, and low-dimensional space shifts s (mixed into per-feature
offsets by the matrix A). All functions here are pure and operate on
immutable value objects, so they are safe to call from parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Visit:
    """One timestamped observation: normalized feature values plus mask."""

    age: float
    values: np.ndarray  # shape (d,), normalized to [0, 1] where observed
    mask: np.ndarray  # shape (d,), bool, True = observed

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        if not np.isfinite(self.age):
            raise ValueError("visit age must be finite")
        if values.shape != mask.shape or values.ndim != 1:
            raise ValueError("values and mask must be 1-d arrays of equal length")
        if not mask.any():
            raise ValueError("a visit needs at least one observed value")
        observed = values[mask]
        if not np.all((observed >= 0.0) & (observed <= 1.0)):
            raise ValueError("observed values must lie in [0, 1]")


@dataclass(frozen=True)
class PatientSeries:
    """All visits of one patient, sorted by strictly increasing age."""

    id: str
    visits: tuple

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        if len(self.visits) < 1:
            raise ValueError(f"patient {self.id}: needs at least one visit")
        ages = [v.age for v in self.visits]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError(f"patient {self.id}: visit ages must strictly increase")

    @property
    def ages(self) -> np.ndarray:
        return np.array([v.age for v in self.visits])


@dataclass(frozen=True)
class Dataset:
    """A cohort of patient series sharing one feature set."""

    patients: tuple
    feature_names: tuple
    feature_meta: tuple = ()  # per-feature (raw_max, direction), may be empty

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "feature_meta", tuple(self.feature_meta))
        d = len(self.feature_names)
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValueError("patient ids must be unique")
        for p in self.patients:
            for v in p.visits:
                if v.values.shape[0] != d:
                    raise ValueError(
                        f"patient {p.id}: visit dimension {v.values.shape[0]} != {d}"
                    )

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def __len__(self) -> int:
        return len(self.patients)


@dataclass(frozen=True)
class FixedEffects:
    """Population-level parameters of the trajectory model."""

    t0: float  # reference age, years
    rho: np.ndarray  # per-feature progression rates, 1/years, > 0
    delta: np.ndarray  # per-feature inflection offsets, years
    A: np.ndarray  # d x n_sources mixing matrix
    sigma: float  # observation noise std, normalized units
    prior_xi_std: float = 0.5
    prior_tau_std: float = 5.0
    prior_s_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float))
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        d = self.rho.shape[0]
        if self.delta.shape != (d,):
            raise ValueError("rho and delta must have the same length")
        if self.A.ndim != 2 or self.A.shape[0] != d:
            raise ValueError("A must be d x n_sources")
        if self.A.shape[1] > d:
            raise ValueError("number of sources must not exceed feature dimension")
        if not np.all(self.rho > 0):
            raise ValueError("progression rates must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if min(self.prior_xi_std, self.prior_tau_std, self.prior_s_std) <= 0:
            raise ValueError("prior stds must be positive")

    @property
    def n_features(self) -> int:
        return self.rho.shape[0]

    @property
    def n_sources(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class RandomEffects:
    """Per-patient deformation parameters (log-pace, time shift, space shifts)."""

    xi: float
    tau: float
    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.atleast_1d(np.asarray(self.s, dtype=float)))
        if not (np.isfinite(self.xi) and np.isfinite(self.tau) and np.all(np.isfinite(self.s))):
            raise ValueError("random effects must be finite")

    @property
    def alpha(self) -> float:
        return float(np.exp(self.xi))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.xi, self.tau], self.s])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "RandomEffects":
        vec = np.asarray(vec, dtype=float)
        return RandomEffects(xi=float(vec[0]), tau=float(vec[1]), s=vec[2:].copy())

    @staticmethod
    def zero(n_sources: int) -> "RandomEffects":
        return RandomEffects(xi=0.0, tau=0.0, s=np.zeros(n_sources))


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic Gaussian observation noise."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def reparametrize_time(z: RandomEffects, t, t0: float):
    """Map chronological age t to the individual's position on the group clock.

    psi(t) = exp(xi) * (t - t0 - tau) + t0, strictly increasing in t.
    """
    return np.exp(z.xi) * (np.asarray(t, dtype=float) - t0 - z.tau) + t0


def eval_trajectory(theta: FixedEffects, z: RandomEffects, t) -> np.ndarray:
    """Evaluate the individual trajectory at age(s) t.

    Returns logistic(rho * (psi(t) - delta) + A s) per feature; values lie in
    the open interval (0, 1) and each coordinate increases with t.
    t may be a scalar (returns shape (d,)) or an array of m ages (returns (m, d)).
    """
    if z.s.shape[0] != theta.n_sources:
        raise ValueError(
            f"space-shift dimension {z.s.shape[0]} != model sources {theta.n_sources}"
        )
    psi = reparametrize_time(z, t, theta.t0)
    w = theta.A @ z.s
    arg = theta.rho * (np.expand_dims(psi, -1) - theta.delta) + w
    return logistic(arg)


def _stack_series(y: PatientSeries):
    ages = np.array([v.age for v in y.visits])
    values = np.stack([v.values for v in y.visits])
    mask = np.stack([v.mask for v in y.visits])
    return ages, values, mask


def _prior_log_density(z: RandomEffects, theta: FixedEffects) -> float:
    def normal_logpdf(x, std):
        return -0.5 * np.sum((np.asarray(x) / std) ** 2) - np.size(x) * (
            np.log(std) + 0.5 * np.log(2.0 * np.pi)
        )

    return float(
        normal_logpdf(z.xi, theta.prior_xi_std)
        + normal_logpdf(z.tau, theta.prior_tau_std)
        + normal_logpdf(z.s, theta.prior_s_std)
    )


def individual_log_likelihood(
    y: PatientSeries, z: RandomEffects, theta: FixedEffects
) -> float:
    """Complete log-likelihood log p(y | z; theta) + log p(z; theta).

    The Gaussian observation term sums over observed (masked) coordinates
    only; unobserved entries never influence the value.
    """
    ages, values, mask = _stack_series(y)
    f = eval_trajectory(theta, z, ages)
    resid = np.where(mask, values - f, 0.0)
    m = int(mask.sum())
    data_term = -0.5 * np.sum((resid / theta.sigma) ** 2) - m * (
        np.log(theta.sigma) + 0.5 * np.log(2.0 * np.pi)
    )
    return float(data_term + _prior_log_density(z, theta))


def gradient_log_likelihood(
    y: PatientSeries, z: RandomEffects, theta: FixedEffects
) -> np.ndarray:
    """Analytic gradient of individual_log_likelihood w.r.t. (xi, tau, s).

    Returned as a vector of length 2 + n_sources, ordered (xi, tau, s_1..).
    """
    ages, values, mask = _stack_series(y)
    psi = reparametrize_time(z, ages, theta.t0)
    w = theta.A @ z.s
    f = logistic(theta.rho * (psi[:, None] - theta.delta) + w)
    resid = np.where(mask, values - f, 0.0)

    # d loglik / d f_kj, then chain through the logistic and its argument
    dl_df = resid / theta.sigma**2
    dl_darg = dl_df * f * (1.0 - f)  # (m, d)

    alpha = np.exp(z.xi)
    dpsi_dxi = alpha * (ages - theta.t0 - z.tau)  # (m,)
    dpsi_dtau = -alpha

    dl_dpsi = dl_darg @ theta.rho  # (m,)
    g_xi = float(np.sum(dl_dpsi * dpsi_dxi)) - z.xi / theta.prior_xi_std**2
    g_tau = float(np.sum(dl_dpsi) * dpsi_dtau) - z.tau / theta.prior_tau_std**2
    g_s = dl_darg.sum(axis=0) @ theta.A - z.s / theta.prior_s_std**2
    return np.concatenate([[g_xi, g_tau], g_s])

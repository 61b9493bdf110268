"""Virtual-cohort generation from fitted random effects.

Temporal parameters (log-pace xi, time shift tau) are resampled with a 2-d
Gaussian kernel density estimate of their empirical distribution; space
shifts are then drawn from the Gaussian conditional of a joint normal
fitted to the full random-effects vectors. New patients get regularly
spaced visits whose values come from the trajectory model, optionally with
observation noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import Dataset, FixedEffects, PatientSeries, RandomEffects, Visit, eval_trajectory
from .pipeline import SIMULATED_ID_PREFIX


class NumericalError(Exception):
    """Singular or otherwise degenerate linear-algebra input."""


@dataclass(frozen=True)
class KdeModel:
    """Gaussian-kernel KDE over (xi, tau) pairs with a shared bandwidth."""

    support_points: np.ndarray  # (n, 2)
    bandwidth_matrix: np.ndarray  # (2, 2) SPD kernel covariance

    def __post_init__(self):
        pts = np.asarray(self.support_points, dtype=float)
        H = np.asarray(self.bandwidth_matrix, dtype=float)
        object.__setattr__(self, "support_points", pts)
        object.__setattr__(self, "bandwidth_matrix", H)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("need at least two (xi, tau) support points")
        if not np.allclose(H, H.T):
            raise ValueError("bandwidth matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(H) <= 0):
            raise ValueError("bandwidth matrix must be positive definite")

    def density(self, points) -> np.ndarray:
        """Evaluate the KDE density at one point (2,) or many (m, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        H_inv = np.linalg.inv(self.bandwidth_matrix)
        norm = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(self.bandwidth_matrix)))
        diff = pts[:, None, :] - self.support_points[None, :, :]  # (m, n, 2)
        quad = np.einsum("mni,ij,mnj->mn", diff, H_inv, diff)
        dens = norm * np.exp(-0.5 * quad).mean(axis=1)
        return dens if np.asarray(points).ndim == 2 else float(dens[0])


def fit_kde(temporal_params) -> KdeModel:
    """Fit a 2-d Gaussian KDE with Scott's rule: kernel covariance is the
    sample covariance scaled by n^(-1/3) (the squared n^(-1/6) factor).
    Degenerate samples (all identical) fall back to a tiny isotropic kernel."""
    pts = np.asarray(temporal_params, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (xi, tau) points")
    n = pts.shape[0]
    cov = np.cov(pts, rowvar=False)
    scott = n ** (-1.0 / 6.0)
    H = scott**2 * cov
    eig = np.linalg.eigvalsh((H + H.T) / 2.0)
    if eig.min() < 1e-12:
        warnings.warn("degenerate temporal-parameter sample; flooring KDE bandwidth")
        H = H + (1e-6 - min(eig.min(), 0.0)) * np.eye(2)
    return KdeModel(support_points=pts, bandwidth_matrix=(H + H.T) / 2.0)


def sample_kde(kde: KdeModel, rng, size=None) -> np.ndarray:
    """Draw from the KDE: uniform support point plus kernel-covariance noise.
    Returns shape (2,) for size=None, else (size, 2)."""
    m = 1 if size is None else size
    idx = rng.integers(kde.support_points.shape[0], size=m)
    L = np.linalg.cholesky(kde.bandwidth_matrix)
    noise = rng.standard_normal((m, 2)) @ L.T
    out = kde.support_points[idx] + noise
    return out[0] if size is None else out


@dataclass(frozen=True)
class JointGaussian:
    """Joint normal over the full random-effects vector (xi, tau, s_1..)."""

    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        S = np.asarray(self.Sigma, dtype=float)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", S)
        if S.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError("Sigma shape must match mu")
        if not np.allclose(S, S.T, atol=1e-10):
            raise ValueError("Sigma must be symmetric")
        if np.linalg.eigvalsh(S).min() < -1e-10:
            raise ValueError("Sigma must be positive semi-definite")

    @property
    def n_sources(self) -> int:
        return self.mu.shape[0] - 2


def fit_joint_gaussian(effects) -> JointGaussian:
    """Moment-match a JointGaussian to a list of RandomEffects."""
    vecs = np.stack([z.as_vector() for z in effects])
    mu = vecs.mean(axis=0)
    if vecs.shape[0] < 2:
        Sigma = np.zeros((vecs.shape[1], vecs.shape[1]))
    else:
        Sigma = np.cov(vecs, rowvar=False)
    Sigma = (Sigma + Sigma.T) / 2.0
    return JointGaussian(mu=mu, Sigma=Sigma)


def conditional_gaussian(joint: JointGaussian, observed):
    """Condition the space-shift block on observed temporal values (xi, tau).

    Returns (mu_tilde, Sigma_tilde) of the conditional normal; the temporal
    block gets a 1e-9 diagonal regularizer before inversion.
    """
    obs = np.asarray(observed, dtype=float)
    if obs.shape != (2,):
        raise ValueError("observed must be the (xi, tau) pair")
    S = joint.Sigma
    S_tt = S[:2, :2] + 1e-9 * np.eye(2)
    S_st = S[2:, :2]
    S_ss = S[2:, 2:]
    try:
        solve = np.linalg.solve(S_tt, np.column_stack([obs - joint.mu[:2], S_st.T]))
    except np.linalg.LinAlgError as e:
        raise NumericalError("temporal covariance block is singular") from e
    if not np.all(np.isfinite(solve)):
        raise NumericalError("temporal covariance block is singular")
    mu_tilde = joint.mu[2:] + S_st @ solve[:, 0]
    Sigma_tilde = S_ss - S_st @ solve[:, 1:]
    Sigma_tilde = (Sigma_tilde + Sigma_tilde.T) / 2.0
    return mu_tilde, Sigma_tilde


def _sample_psd(mu, Sigma, rng):
    # eigendecomposition handles the PSD (possibly rank-deficient) case
    eigval, eigvec = np.linalg.eigh(Sigma)
    eigval = np.clip(eigval, 0.0, None)
    return mu + eigvec @ (np.sqrt(eigval) * rng.standard_normal(mu.shape[0]))


@dataclass(frozen=True)
class SimulationConfig:
    """Shape of the virtual cohort to generate."""

    n_patients: int
    visits_per_patient: int
    visit_spacing: float = 1.0
    first_visit_ages: tuple = ()  # empirical baseline-age pool to resample
    add_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "first_visit_ages", tuple(self.first_visit_ages))
        if self.n_patients < 1:
            raise ValueError("n_patients must be at least 1")
        if self.visits_per_patient < 1:
            raise ValueError("visits_per_patient must be at least 1")
        if self.visit_spacing <= 0:
            raise ValueError("visit_spacing must be positive")


def sample_random_effects(kde: KdeModel, joint: JointGaussian, rng) -> RandomEffects:
    """Hybrid draw: temporal pair from the KDE, space shifts from the
    conditional Gaussian given that pair."""
    xi, tau = sample_kde(kde, rng)
    if joint.n_sources > 0:
        mu_t, Sig_t = conditional_gaussian(joint, (xi, tau))
        s = _sample_psd(mu_t, Sig_t, rng)
    else:
        s = np.zeros(0)
    return RandomEffects(xi=float(xi), tau=float(tau), s=s)


def simulate_cohort(
    theta: FixedEffects, fitted_z, cfg: SimulationConfig,
    feature_names=None, feature_meta=(),
) -> Dataset:
    """Simulate a fully observed virtual cohort from fitted random effects."""
    if not fitted_z:
        raise ValueError("need at least one fitted random-effects vector")
    rng = np.random.default_rng(cfg.seed)
    temporal = [(z.xi, z.tau) for z in fitted_z]
    if len(temporal) >= 2:
        kde = fit_kde(temporal)
    else:
        # single support point: degenerate resampling of that point
        kde = fit_kde([temporal[0], temporal[0]])
    joint = fit_joint_gaussian(fitted_z)

    ages_pool = np.asarray(cfg.first_visit_ages, dtype=float)
    d = theta.n_features
    patients = []
    for i in range(cfg.n_patients):
        z = sample_random_effects(kde, joint, rng)
        if ages_pool.size:
            t_first = float(ages_pool[rng.integers(ages_pool.size)])
        else:
            t_first = theta.t0
        ages = t_first + cfg.visit_spacing * np.arange(cfg.visits_per_patient)
        values = eval_trajectory(theta, z, ages)
        if cfg.add_noise:
            values = np.clip(values + rng.normal(0.0, theta.sigma, values.shape), 0.0, 1.0)
        visits = [
            Visit(age=float(a), values=values[j], mask=np.ones(d, bool))
            for j, a in enumerate(ages)
        ]
        patients.append(PatientSeries(id=f"{SIMULATED_ID_PREFIX}{i}", visits=visits))
    names = feature_names if feature_names is not None else [f"f{k}" for k in range(d)]
    return Dataset(patients=patients, feature_names=names, feature_meta=feature_meta)

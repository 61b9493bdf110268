"""Population-model estimation by MCMC-SAEM.

Each iteration runs a Metropolis-within-Gibbs sweep over the per-patient
random effects (blocks xi, tau, s), folds the current latent state into
exponentially smoothed sufficient statistics, and applies a stochastic
approximation M-step: the noise level comes from the smoothed mean squared
residual and the trajectory parameters from one bounded gradient-ascent
step on the smoothed complete log-likelihood. Everything is vectorized
across patients, so cohorts of a few hundred subjects calibrate in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    Dataset,
    FixedEffects,
    PatientSeries,
    RandomEffects,
    individual_log_likelihood,
    logistic,
)

SIGMA_FLOOR = 1e-6
RHO_FLOOR = 1e-4


class CalibrationError(Exception):
    """Non-finite likelihood or otherwise unusable state during estimation."""


@dataclass(frozen=True)
class SaemConfig:
    n_iter: int = 400
    n_burn_in: int = 120
    step_exponent: float = 0.65
    proposal_stds: dict = field(
        default_factory=lambda: {"xi": 0.1, "tau": 1.0, "s": 0.1}
    )
    seed: int = 0
    n_sources: int | None = None  # default min(d - 1, 2)
    prior_xi_std: float = 0.5
    prior_tau_std: float = 5.0
    prior_s_std: float = 1.0
    theta_lr: float = 5.0  # step length for the M-step ascent direction
    n_mh_per_block: int = 2

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be positive")
        if not 0 <= self.n_burn_in < self.n_iter:
            raise ValueError("n_burn_in must be in [0, n_iter)")
        if not 0.5 < self.step_exponent <= 1.0:
            raise ValueError("step_exponent must lie in (0.5, 1]")
        if any(v < 0 for v in self.proposal_stds.values()):
            raise ValueError("proposal stds must be non-negative")


@dataclass(frozen=True)
class CalibrationResult:
    theta: FixedEffects
    z_chain_last: dict  # patient id -> RandomEffects, final MCMC state
    trace: np.ndarray  # (n_iter, 2): sigma, data log-likelihood

    def to_json(self, feature_names) -> dict:
        return {
            "version": 1,
            "feature_names": list(feature_names),
            "theta": {
                "t0": self.theta.t0,
                "rho": self.theta.rho.tolist(),
                "delta": self.theta.delta.tolist(),
                "A": self.theta.A.tolist(),
                "sigma": self.theta.sigma,
                "prior_xi_std": self.theta.prior_xi_std,
                "prior_tau_std": self.theta.prior_tau_std,
                "prior_s_std": self.theta.prior_s_std,
            },
            "diagnostics": {
                "n_iter": int(self.trace.shape[0]),
                "final_sigma": float(self.trace[-1, 0]),
                "final_data_log_likelihood": float(self.trace[-1, 1]),
                "sigma_trace": self.trace[:, 0].tolist(),
                "data_log_likelihood_trace": self.trace[:, 1].tolist(),
            },
        }


def theta_from_json(doc: dict) -> FixedEffects:
    t = doc["theta"]
    return FixedEffects(
        t0=float(t["t0"]),
        rho=np.array(t["rho"]),
        delta=np.array(t["delta"]),
        A=np.array(t["A"]),
        sigma=float(t["sigma"]),
        prior_xi_std=float(t["prior_xi_std"]),
        prior_tau_std=float(t["prior_tau_std"]),
        prior_s_std=float(t["prior_s_std"]),
    )


def step_size(k: int, cfg: SaemConfig) -> float:
    """Stochastic-approximation schedule: 1 during burn-in, then polynomial
    decay (Robbins-Monro compatible for exponents in (0.5, 1])."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    if k <= cfg.n_burn_in:
        return 1.0
    return float((k - cfg.n_burn_in) ** (-cfg.step_exponent))


def smooth(old, new, step: float):
    """Stochastic-approximation recursion S <- S + step * (S_new - S)."""
    if not 0.0 < step <= 1.0:
        raise ValueError("step must lie in (0, 1]")
    return old + step * (new - old)


def mh_block_step(y_i, z: RandomEffects, theta: FixedEffects, block: str,
                  proposal_std: float, rng):
    """One Metropolis step on a single random-effects block of one patient.

    Symmetric Gaussian random-walk proposal; acceptance probability
    min(1, exp(delta log-likelihood)). Returns (new z, accepted flag).
    """
    if block not in ("xi", "tau", "s"):
        raise ValueError(f"unknown block {block!r}")
    if block == "xi":
        prop = RandomEffects(z.xi + proposal_std * rng.standard_normal(), z.tau, z.s)
    elif block == "tau":
        prop = RandomEffects(z.xi, z.tau + proposal_std * rng.standard_normal(), z.s)
    else:
        prop = RandomEffects(
            z.xi, z.tau, z.s + proposal_std * rng.standard_normal(z.s.shape)
        )
    delta = individual_log_likelihood(y_i, prop, theta) - individual_log_likelihood(
        y_i, z, theta
    )
    if np.log(rng.uniform()) < delta:
        return prop, True
    return z, False


# -- packed cohort representation -------------------------------------------

class _Packed:
    """Cohort as padded arrays for vectorized likelihood computations."""

    def __init__(self, ds: Dataset, pad_age: float):
        n = len(ds.patients)
        mv = max(len(p.visits) for p in ds.patients)
        d = ds.n_features
        self.ages = np.full((n, mv), pad_age)
        self.values = np.zeros((n, mv, d))
        self.obs = np.zeros((n, mv, d), dtype=bool)
        for i, p in enumerate(ds.patients):
            for j, v in enumerate(p.visits):
                self.ages[i, j] = v.age
                self.values[i, j] = np.where(v.mask, v.values, 0.0)
                self.obs[i, j] = v.mask
        self.n, self.mv, self.d = n, mv, d
        self.n_obs = int(self.obs.sum())
        self.m_i = self.obs.sum(axis=(1, 2))  # observed scalars per patient
        self.ids = [p.id for p in ds.patients]


def _predict(pk: _Packed, theta: FixedEffects, xi, tau, s):
    psi = np.exp(xi)[:, None] * (pk.ages - theta.t0 - tau[:, None]) + theta.t0
    arg = theta.rho * (psi[..., None] - theta.delta) + (s @ theta.A.T)[:, None, :]
    return logistic(arg), psi


def _data_loglik_per_patient(pk: _Packed, theta, xi, tau, s):
    f, _ = _predict(pk, theta, xi, tau, s)
    resid = np.where(pk.obs, pk.values - f, 0.0)
    sq = (resid**2).sum(axis=(1, 2))
    return -0.5 * sq / theta.sigma**2 - pk.m_i * (
        np.log(theta.sigma) + 0.5 * np.log(2.0 * np.pi)
    )


def _prior_loglik_per_patient(cfg_like, xi, tau, s):
    out = -0.5 * (xi / cfg_like.prior_xi_std) ** 2
    out = out - 0.5 * (tau / cfg_like.prior_tau_std) ** 2
    out = out - 0.5 * ((s / cfg_like.prior_s_std) ** 2).sum(axis=1)
    return out  # constants are irrelevant for MH ratios


def _theta_gradient(pk: _Packed, theta: FixedEffects, xi, tau, s):
    """Gradient of the data log-likelihood w.r.t. (t0, rho, delta, A)."""
    f, psi = _predict(pk, theta, xi, tau, s)
    resid = np.where(pk.obs, pk.values - f, 0.0)
    dl_darg = resid * f * (1.0 - f) / theta.sigma**2  # (n, mv, d)
    g_rho = np.einsum("ijk,ijk->k", dl_darg, psi[..., None] - theta.delta[None, None, :])
    g_delta = -theta.rho * dl_darg.sum(axis=(0, 1))
    dpsi_dt0 = 1.0 - np.exp(xi)  # per patient, same for all visits
    g_t0 = float(np.einsum("ijk,k,i->", dl_darg, theta.rho, dpsi_dt0))
    g_A = np.einsum("ijk,il->kl", dl_darg, s)
    return g_t0, g_rho, g_delta, g_A


def _total_data_loglik(pk, theta, xi, tau, s):
    return float(_data_loglik_per_patient(pk, theta, xi, tau, s).sum())


def update_theta(pk: _Packed, theta: FixedEffects, smoothed_msr: float,
                 xi, tau, s, lr: float) -> FixedEffects:
    """Stochastic-approximation M-step.

    sigma comes from the smoothed mean squared residual (floored); the
    trajectory parameters take one gradient-ascent step, backtracking until
    the complete log-likelihood does not decrease, with per-parameter caps
    on the move size.
    """
    sigma = float(np.sqrt(max(smoothed_msr, SIGMA_FLOOR**2)))
    base = FixedEffects(theta.t0, theta.rho, theta.delta, theta.A, sigma,
                        theta.prior_xi_std, theta.prior_tau_std, theta.prior_s_std)
    g_t0, g_rho, g_delta, g_A = _theta_gradient(pk, base, xi, tau, s)
    scale = lr / max(pk.n_obs, 1)
    ref = _total_data_loglik(pk, base, xi, tau, s)
    factor = 1.0
    for _ in range(12):
        d_t0 = np.clip(factor * scale * g_t0, -0.5, 0.5)
        d_rho = np.clip(factor * scale * g_rho, -0.1, 0.1)
        d_delta = np.clip(factor * scale * g_delta, -0.5, 0.5)
        d_A = np.clip(factor * scale * g_A, -0.1, 0.1)
        cand = FixedEffects(
            base.t0 + d_t0,
            np.maximum(base.rho + d_rho, RHO_FLOOR),
            base.delta + d_delta,
            base.A + d_A,
            sigma,
            base.prior_xi_std, base.prior_tau_std, base.prior_s_std,
        )
        if _total_data_loglik(pk, cand, xi, tau, s) >= ref:
            return cand
        factor *= 0.5
    return base


def calibrate(estimation_set: Dataset, cfg: SaemConfig) -> CalibrationResult:
    """Run MCMC-SAEM on a cohort and return fitted fixed effects plus the
    final latent state and a per-iteration (sigma, data log-likelihood) trace.
    Deterministic for a fixed config seed."""
    if len(estimation_set) == 0:
        raise ValueError("estimation set must be non-empty")
    d = estimation_set.n_features
    ns = cfg.n_sources if cfg.n_sources is not None else max(min(d - 1, 2), 0)
    if ns > d:
        raise ValueError("n_sources must not exceed the feature dimension")

    all_ages = np.concatenate([p.ages for p in estimation_set.patients])
    t0 = float(all_ages.mean())
    pk = _Packed(estimation_set, pad_age=t0)

    theta = FixedEffects(
        t0=t0,
        rho=np.ones(d),
        delta=np.full(d, t0),
        A=np.zeros((d, max(ns, 1)))[:, :ns] if ns else np.zeros((d, 0)),
        sigma=0.1,
        prior_xi_std=cfg.prior_xi_std,
        prior_tau_std=cfg.prior_tau_std,
        prior_s_std=cfg.prior_s_std,
    )

    rng = np.random.default_rng(cfg.seed)
    n = pk.n
    xi = np.zeros(n)
    tau = np.zeros(n)
    s = np.zeros((n, ns))

    # smoothed sufficient statistics
    msr = None
    xi_s, tau_s, s_s = xi.copy(), tau.copy(), s.copy()

    trace = np.zeros((cfg.n_iter, 2))
    loglik = _data_loglik_per_patient(pk, theta, xi, tau, s) + \
        _prior_loglik_per_patient(theta, xi, tau, s)

    for k in range(1, cfg.n_iter + 1):
        step = step_size(k, cfg)

        for _ in range(cfg.n_mh_per_block):
            for block in ("xi", "tau", "s"):
                std = cfg.proposal_stds[block]
                if block == "xi":
                    prop = (xi + std * rng.standard_normal(n), tau, s)
                elif block == "tau":
                    prop = (xi, tau + std * rng.standard_normal(n), s)
                else:
                    if ns == 0:
                        continue
                    prop = (xi, tau, s + std * rng.standard_normal((n, ns)))
                cand = _data_loglik_per_patient(pk, theta, *prop) + \
                    _prior_loglik_per_patient(theta, *prop)
                if not np.all(np.isfinite(cand)):
                    bad = pk.ids[int(np.flatnonzero(~np.isfinite(cand))[0])]
                    raise CalibrationError(
                        f"non-finite likelihood for patient {bad} at iteration {k}"
                    )
                accept = np.log(rng.uniform(size=n)) < cand - loglik
                xi = np.where(accept, prop[0], xi)
                tau = np.where(accept, prop[1], tau)
                if ns:
                    s = np.where(accept[:, None], prop[2], s)
                loglik = np.where(accept, cand, loglik)

        # new sufficient statistics from the current latent state
        f, _ = _predict(pk, theta, xi, tau, s)
        resid = np.where(pk.obs, pk.values - f, 0.0)
        msr_new = float((resid**2).sum() / max(pk.n_obs, 1))
        if msr is None:
            msr, xi_s, tau_s, s_s = msr_new, xi.copy(), tau.copy(), s.copy()
        else:
            msr = smooth(msr, msr_new, step)
            xi_s = smooth(xi_s, xi, step)
            tau_s = smooth(tau_s, tau, step)
            s_s = smooth(s_s, s, step)

        theta = update_theta(pk, theta, msr, xi_s, tau_s, s_s, cfg.theta_lr)
        loglik = _data_loglik_per_patient(pk, theta, xi, tau, s) + \
            _prior_loglik_per_patient(theta, xi, tau, s)
        data_ll = _total_data_loglik(pk, theta, xi, tau, s)
        if not (np.isfinite(theta.sigma) and np.isfinite(data_ll)):
            raise CalibrationError(f"non-finite state at iteration {k}")
        trace[k - 1] = (theta.sigma, data_ll)

    z_last = {
        pk.ids[i]: RandomEffects(xi=float(xi[i]), tau=float(tau[i]), s=s[i].copy())
        for i in range(n)
    }
    return CalibrationResult(theta=theta, z_chain_last=z_last, trace=trace)

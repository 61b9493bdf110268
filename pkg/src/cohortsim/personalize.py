"""MAP estimation of individual random effects under a fixed population model.

The individual complete likelihood is maximized with bound-constrained
L-BFGS-B, restarted from the prior mode and from random prior draws since
the logistic likelihood can be multimodal in the time shift.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .model import (
    Dataset,
    FixedEffects,
    PatientSeries,
    RandomEffects,
    gradient_log_likelihood,
    individual_log_likelihood,
)

DEFAULT_BOUNDS = {"xi": (-3.0, 3.0), "tau": (-15.0, 15.0), "s": (-5.0, 5.0)}


@dataclass(frozen=True)
class PersonalizeConfig:
    max_evals: int = 500
    grad_tol: float = 1e-6
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    n_restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.max_evals < 1 or self.n_restarts < 1:
            raise ValueError("max_evals and n_restarts must be positive")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        for name, (lo, hi) in self.bounds.items():
            if lo >= hi:
                raise ValueError(f"bounds for {name}: lo must be < hi")

    def bounds_vector(self, n_sources: int):
        return (
            [self.bounds["xi"], self.bounds["tau"]]
            + [self.bounds["s"]] * n_sources
        )


@dataclass(frozen=True)
class PersonalizeResult:
    z: RandomEffects
    objective: float
    fallback: bool = False  # True if every restart failed and the prior mode
    # was returned instead


def personalize(
    y: PatientSeries, theta: FixedEffects, cfg: PersonalizeConfig = PersonalizeConfig()
) -> PersonalizeResult:
    """Fit one patient's random effects by bounded quasi-Newton ascent."""
    ns = theta.n_sources
    bounds = cfg.bounds_vector(ns)
    rng = np.random.default_rng(cfg.seed)

    def neg_obj(vec):
        z = RandomEffects.from_vector(vec)
        return -individual_log_likelihood(y, z, theta)

    def neg_grad(vec):
        return -gradient_log_likelihood(y, RandomEffects.from_vector(vec), theta)

    starts = [np.zeros(2 + ns)]
    for _ in range(cfg.n_restarts - 1):
        draw = np.concatenate(
            [
                [rng.normal(0.0, theta.prior_xi_std)],
                [rng.normal(0.0, theta.prior_tau_std)],
                rng.normal(0.0, theta.prior_s_std, ns),
            ]
        )
        starts.append(np.clip(draw, [b[0] for b in bounds], [b[1] for b in bounds]))

    best_vec, best_val = None, np.inf
    any_success = False
    for x0 in starts:
        res = minimize(
            neg_obj,
            x0,
            jac=neg_grad,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxfun": cfg.max_evals, "gtol": cfg.grad_tol, "ftol": 1e-14},
        )
        if np.isfinite(res.fun):
            any_success = any_success or res.success
            if res.fun < best_val:
                best_val, best_vec = res.fun, res.x

    prior_mode_val = neg_obj(np.zeros(2 + ns))
    if best_vec is None:
        warnings.warn(f"patient {y.id}: all personalization restarts failed")
        return PersonalizeResult(
            z=RandomEffects.zero(ns), objective=-prior_mode_val, fallback=True
        )
    # never return something worse than the prior mode
    if best_val > prior_mode_val:
        best_vec, best_val = np.zeros(2 + ns), prior_mode_val
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    best_vec = np.clip(best_vec, lo, hi)
    return PersonalizeResult(
        z=RandomEffects.from_vector(best_vec), objective=-best_val
    )


def batch_personalize(
    ds: Dataset, theta: FixedEffects, cfg: PersonalizeConfig = PersonalizeConfig()
) -> dict:
    """Personalize every patient; per-patient seeds derive from (cfg.seed, index)
    so the result is independent of evaluation order."""
    out = {}
    for idx, patient in enumerate(ds.patients):
        seed = np.random.SeedSequence([cfg.seed, idx]).generate_state(1)[0]
        per_cfg = PersonalizeConfig(
            max_evals=cfg.max_evals,
            grad_tol=cfg.grad_tol,
            bounds=cfg.bounds,
            n_restarts=cfg.n_restarts,
            seed=int(seed),
        )
        out[patient.id] = personalize(patient, theta, per_cfg)
    return out


def results_to_json(results: dict) -> dict:
    return {
        "version": 1,
        "patients": {
            pid: {
                "xi": r.z.xi,
                "tau": r.z.tau,
                "s": r.z.s.tolist(),
                "objective": r.objective,
                "fallback": r.fallback,
            }
            for pid, r in results.items()
        },
    }

"""Experiment orchestration: metrics, baselines, fidelity reports, and the
standard-vs-augmented benchmark loop.

The augmented setting follows the simulation pipeline end to end: partition
the cohort (subjects without an admissible prediction split always feed the
estimation set), calibrate the mixed-effects model, personalize the
estimation subjects, simulate a virtual training cohort, and train the
sequence predictor on simulated pairs only, testing on held-out real pairs.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .calibration import SaemConfig, calibrate
from .model import Dataset, PatientSeries, RandomEffects, Visit, eval_trajectory
from .personalize import PersonalizeConfig, batch_personalize
from .pipeline import (
    PartitionScheme,
    PredictionPair,
    partition,
    split_delta_t,
    strict_simulated_training_guard,
)
from .predictor import TrainConfig, encode_pair, forward, train
from .simulate import SimulationConfig, simulate_cohort

N_HISTOGRAM_BINS = 30


def mae(predictions, targets) -> float:
    """Mean absolute error on the normalized scale."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and targets must have equal non-zero length")
    return float(np.mean(np.abs(p - t)))


def constant_baseline(pair: PredictionPair):
    """No-change prediction: last observed value of the target feature among
    the input visits, or None when the feature was never observed."""
    k = pair.target_feature_index
    for v in reversed(pair.input_visits):
        if v.mask[k]:
            return float(v.values[k])
    return None


def baseline_mae(pairs):
    """Constant-prediction MAE; pairs whose target feature is unseen in the
    inputs are excluded and counted separately."""
    preds, targets, excluded = [], [], 0
    for pair in pairs:
        b = constant_baseline(pair)
        if b is None:
            excluded += 1
            continue
        preds.append(b)
        targets.append(pair.target_value)
    if not preds:
        return None, excluded
    return mae(preds, targets), excluded


def noise_floor(raw_std: float, raw_max: float) -> float:
    """Test/retest noise converted to an MAE equivalent: the mean absolute
    deviation of a centered Gaussian, (raw_std / raw_max) * sqrt(2 / pi)."""
    if raw_std < 0 or raw_max <= 0:
        raise ValueError("raw_std must be >= 0 and raw_max > 0")
    return (raw_std / raw_max) * float(np.sqrt(2.0 / np.pi))


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic (sup distance of the ECDFs)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _pooled_values(ds: Dataset, k: int) -> np.ndarray:
    vals = [
        v.values[k] for p in ds.patients for v in p.visits if v.mask[k]
    ]
    return np.asarray(vals, dtype=float)


def distribution_report(real: Dataset, simulated: Dataset) -> dict:
    """Per-feature comparison of pooled visit values: histogram counts on 30
    uniform bins over [0, 1], empirical CDF knots, and the KS statistic."""
    if real.feature_names != simulated.feature_names:
        raise ValueError("datasets must share the same feature set")
    edges = np.linspace(0.0, 1.0, N_HISTOGRAM_BINS + 1)
    report = {"bin_edges": edges.tolist(), "features": {}}
    for k, name in enumerate(real.feature_names):
        rv = _pooled_values(real, k)
        sv = _pooled_values(simulated, k)
        if rv.size == 0 or sv.size == 0:
            report["features"][name] = {"absent": True}
            continue
        report["features"][name] = {
            "absent": False,
            "ks": ks_statistic(rv, sv),
            "real_histogram": np.histogram(rv, bins=edges)[0].tolist(),
            "simulated_histogram": np.histogram(sv, bins=edges)[0].tolist(),
            "real_cdf_x": np.sort(rv).tolist(),
            "simulated_cdf_x": np.sort(sv).tolist(),
            "n_real": int(rv.size),
            "n_simulated": int(sv.size),
        }
    return report


@dataclass(frozen=True)
class VisitPlan:
    """Follow-up structure for synthetic cohorts: baseline age range and a
    distribution over visit counts at fixed spacing."""

    baseline_age_range: tuple = (65.0, 78.0)
    n_visits_choices: tuple = (6,)
    n_visits_probs: tuple = ()  # empty = uniform
    spacing: float = 1.0

    def draw(self, rng):
        probs = np.asarray(self.n_visits_probs) if self.n_visits_probs else None
        n = int(rng.choice(self.n_visits_choices, p=probs))
        base = float(rng.uniform(*self.baseline_age_range))
        return base + self.spacing * np.arange(n)


def synth_cohort(theta_star, n_patients: int, plan: VisitPlan,
                 missing_rate: float, rng, id_prefix="synth-") -> Dataset:
    """Ground-truth generator: draws random effects from the model priors,
    emits noisy trajectory values, and masks entries independently at the
    given rate (always keeping at least one observed value per visit)."""
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing rate must lie in [0, 1)")
    d = theta_star.n_features
    patients = []
    for i in range(n_patients):
        z = RandomEffects(
            rng.normal(0.0, theta_star.prior_xi_std),
            rng.normal(0.0, theta_star.prior_tau_std),
            rng.normal(0.0, theta_star.prior_s_std, theta_star.n_sources),
        )
        ages = plan.draw(rng)
        vals = eval_trajectory(theta_star, z, ages)
        if theta_star.sigma > 0:
            vals = np.clip(vals + rng.normal(0.0, theta_star.sigma, vals.shape), 0, 1)
        visits = []
        for j, age in enumerate(ages):
            mask = rng.uniform(size=d) >= missing_rate
            if not mask.any():
                mask[rng.integers(d)] = True
            visits.append(Visit(age=float(age), values=vals[j], mask=mask))
        patients.append(PatientSeries(id=f"{id_prefix}{i}", visits=visits))
    return Dataset(patients=patients, feature_names=[f"f{k}" for k in range(d)])


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str  # "standard" | "augmented"
    delta_t: float
    target_feature_index: int = 0
    tolerance: float = 0.25
    test_fraction: float = 0.5
    validation_fraction: float = 0.1
    n_simulated_patients: int = 500
    simulated_visits_per_patient: int = 8
    visit_spacing: float = 1.0
    add_simulation_noise: bool = True
    n_runs: int = 10
    seed: int = 0
    saem: SaemConfig = field(default_factory=SaemConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    strict_guard: bool = True

    def __post_init__(self):
        if self.mode not in ("standard", "augmented"):
            raise ValueError("mode must be standard or augmented")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")


@dataclass(frozen=True)
class ExperimentReport:
    mode: str
    delta_t: float
    per_run_mae: tuple
    mean_mae: float
    std_mae: float
    baseline_mae: float | None
    noise_band: tuple
    train_size: int
    test_size: int
    guard: bool | None
    config: dict
    wall_clock_seconds: float
    failed_runs: tuple = ()

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["per_run_mae"] = list(self.per_run_mae)
        doc["noise_band"] = list(self.noise_band)
        doc["failed_runs"] = list(self.failed_runs)
        doc["version"] = 1
        return doc


def _evaluate_pairs(params, pairs, d):
    preds = [forward(params, encode_pair(p, d)) for p in pairs]
    targets = [p.target_value for p in pairs]
    return mae(preds, targets)


def _split_pairs_train_test(pairs, test_fraction, validation_fraction, rng):
    order = rng.permutation(len(pairs))
    n_test = int(np.floor(test_fraction * len(pairs)))
    n_val = int(np.floor(validation_fraction * len(pairs)))
    test = [pairs[i] for i in order[:n_test]]
    val = [pairs[i] for i in order[n_test : n_test + n_val]]
    tr = [pairs[i] for i in order[n_test + n_val :]]
    return tr, val, test


def _run_once_standard(ds, cfg: ExperimentConfig, rng, saem_seed):
    split = split_delta_t(ds, cfg.delta_t, cfg.tolerance,
                          cfg.target_feature_index, rng)
    tr, val, test = _split_pairs_train_test(
        list(split.pairs), cfg.test_fraction, cfg.validation_fraction, rng
    )
    train_cfg = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        weight_decay=cfg.train.weight_decay,
        batch_size=cfg.train.batch_size,
        max_epochs=cfg.train.max_epochs,
        patience=cfg.train.patience,
        hidden_dim=cfg.train.hidden_dim,
        seed=saem_seed,
    )
    params, _ = train(tr, val, train_cfg, d=ds.n_features)
    return {
        "mae": _evaluate_pairs(params, test, ds.n_features),
        "test_pairs": test,
        "train_size": len(tr),
        "test_size": len(test),
        "guard": None,
    }


def _run_once_augmented(ds, cfg: ExperimentConfig, rng, saem_seed):
    probe = split_delta_t(ds, cfg.delta_t, cfg.tolerance,
                          cfg.target_feature_index, rng)
    estimation, test_ds, val_ds = partition(
        ds,
        PartitionScheme(cfg.test_fraction, cfg.validation_fraction),
        probe.discarded_ids,
        rng,
    )
    saem = SaemConfig(
        n_iter=cfg.saem.n_iter, n_burn_in=cfg.saem.n_burn_in,
        step_exponent=cfg.saem.step_exponent,
        proposal_stds=cfg.saem.proposal_stds, seed=saem_seed,
        n_sources=cfg.saem.n_sources,
        prior_xi_std=cfg.saem.prior_xi_std,
        prior_tau_std=cfg.saem.prior_tau_std,
        prior_s_std=cfg.saem.prior_s_std,
        theta_lr=cfg.saem.theta_lr, n_mh_per_block=cfg.saem.n_mh_per_block,
    )
    calib = calibrate(estimation, saem)
    fits = batch_personalize(estimation, calib.theta, cfg.personalize)
    fitted_z = [r.z for r in fits.values()]
    baseline_ages = tuple(float(p.visits[0].age) for p in estimation.patients)
    sim_cfg = SimulationConfig(
        n_patients=cfg.n_simulated_patients,
        visits_per_patient=cfg.simulated_visits_per_patient,
        visit_spacing=cfg.visit_spacing,
        first_visit_ages=baseline_ages,
        add_noise=cfg.add_simulation_noise,
        seed=saem_seed,
    )
    simulated = simulate_cohort(calib.theta, fitted_z, sim_cfg,
                                feature_names=ds.feature_names)
    guard = strict_simulated_training_guard(
        simulated, [p.id for p in estimation.patients]
    )
    if cfg.strict_guard and not guard:
        raise RuntimeError("simulated-only training guard violated")

    sim_split = split_delta_t(simulated, cfg.delta_t, cfg.tolerance,
                              cfg.target_feature_index, rng)
    test_split = split_delta_t(test_ds, cfg.delta_t, cfg.tolerance,
                               cfg.target_feature_index, rng)
    val_split = split_delta_t(val_ds, cfg.delta_t, cfg.tolerance,
                              cfg.target_feature_index, rng)
    train_cfg = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        weight_decay=cfg.train.weight_decay,
        batch_size=cfg.train.batch_size,
        max_epochs=cfg.train.max_epochs,
        patience=cfg.train.patience,
        hidden_dim=cfg.train.hidden_dim,
        seed=saem_seed,
    )
    params, _ = train(list(sim_split.pairs), list(val_split.pairs), train_cfg,
                      d=ds.n_features)
    return {
        "mae": _evaluate_pairs(params, list(test_split.pairs), ds.n_features),
        "test_pairs": list(test_split.pairs),
        "train_size": len(sim_split.pairs),
        "test_size": len(test_split.pairs),
        "guard": guard,
    }


def run_experiment(ds: Dataset, cfg: ExperimentConfig,
                   noise_band=(0.035, 0.074)) -> ExperimentReport:
    """Run n_runs independent repetitions with re-randomized test splits and
    aggregate the test MAE. Failed runs are reported, not fatal, as long as
    one run completes."""
    start = time.time()
    maes, failures = [], []
    last = None
    for r in range(cfg.n_runs):
        run_seed = int(np.random.SeedSequence([cfg.seed, r]).generate_state(1)[0])
        rng = np.random.default_rng(run_seed)
        try:
            if cfg.mode == "standard":
                last = _run_once_standard(ds, cfg, rng, run_seed)
            else:
                last = _run_once_augmented(ds, cfg, rng, run_seed)
            maes.append(last["mae"])
        except Exception as e:  # noqa: BLE001 - partial reporting by design
            failures.append(f"run {r}: {type(e).__name__}: {e}")
    if not maes:
        raise RuntimeError("all runs failed: " + "; ".join(failures))
    base, _ = baseline_mae(last["test_pairs"])
    return ExperimentReport(
        mode=cfg.mode,
        delta_t=cfg.delta_t,
        per_run_mae=tuple(maes),
        mean_mae=float(np.mean(maes)),
        std_mae=float(np.std(maes)),
        baseline_mae=base,
        noise_band=tuple(noise_band),
        train_size=last["train_size"],
        test_size=last["test_size"],
        guard=last["guard"],
        config={
            "mode": cfg.mode, "delta_t": cfg.delta_t,
            "tolerance": cfg.tolerance,
            "target_feature_index": cfg.target_feature_index,
            "n_simulated_patients": cfg.n_simulated_patients,
            "n_runs": cfg.n_runs, "seed": cfg.seed,
        },
        wall_clock_seconds=time.time() - start,
        failed_runs=tuple(failures),
    )


def run_simulated_size_sweep(ds: Dataset, cfg: ExperimentConfig,
                             sizes=(50, 100, 250, 500, 1000)):
    """Augmented-mode reports for a range of virtual-cohort sizes."""
    from dataclasses import replace

    reports = []
    for size in sizes:
        reports.append(
            run_experiment(ds, replace(cfg, mode="augmented",
                                       n_simulated_patients=size))
        )
    return list(sizes), reports


def reports_to_tidy_csv(reports, path):
    """One row per run x config, plot-ready."""
    import csv

    with atomic_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "mode", "delta_t", "n_simulated_patients", "run", "mae",
            "baseline_mae", "train_size", "test_size",
        ])
        for rep in reports:
            for r, m in enumerate(rep.per_run_mae):
                writer.writerow([
                    rep.mode, rep.delta_t,
                    rep.config.get("n_simulated_patients"),
                    r, m, rep.baseline_mae, rep.train_size, rep.test_size,
                ])


class atomic_write:
    """Write to a temp file in the target directory, rename on success."""

    def __init__(self, path):
        self.path = str(path)

    def __enter__(self):
        directory = os.path.dirname(self.path) or "."
        fd, self.tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        self.fh = os.fdopen(fd, "w", newline="")
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def write_json(doc, path):
    with atomic_write(path) as fh:
        json.dump(doc, fh, indent=2)

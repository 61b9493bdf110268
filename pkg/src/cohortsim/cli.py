"""Command-line entry points.

Every subcommand reads a JSON config file and writes its outputs into
--out-dir. Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .calibration import CalibrationError, SaemConfig, calibrate, theta_from_json
from .evaluation import (
    ExperimentConfig,
    VisitPlan,
    distribution_report,
    reports_to_tidy_csv,
    run_experiment,
    run_simulated_size_sweep,
    synth_cohort,
    write_json,
)
from .model import FixedEffects, RandomEffects
from .personalize import PersonalizeConfig, batch_personalize, results_to_json
from .pipeline import (
    DataError,
    FeatureSpec,
    load_dataset,
    save_dataset,
    split_delta_t,
    write_manifest,
)
from .predictor import TrainConfig, TrainingError, history_to_csv, train
from .simulate import NumericalError, SimulationConfig, simulate_cohort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    pass


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing config key: {key}")
    return cfg[key]


def _feature_specs(cfg: dict):
    specs = []
    for item in _require(cfg, "features"):
        specs.append(FeatureSpec(
            name=_require(item, "name"),
            raw_max=float(item.get("raw_max", 1.0)),
            direction=item.get("direction", "increasing"),
        ))
    return specs


def _feature_index(cfg, specs):
    name = _require(cfg, "target_feature")
    names = [s.name for s in specs]
    if name not in names:
        raise ConfigError(f"target_feature {name!r} not among features {names}")
    return names.index(name)


def _saem_config(cfg: dict, seed):
    sub = cfg.get("saem", {})
    return SaemConfig(
        n_iter=int(sub.get("n_iter", 400)),
        n_burn_in=int(sub.get("n_burn_in", 120)),
        step_exponent=float(sub.get("step_exponent", 0.65)),
        proposal_stds=sub.get("proposal_stds", {"xi": 0.1, "tau": 1.0, "s": 0.1}),
        seed=seed,
        n_sources=sub.get("n_sources"),
        prior_xi_std=float(sub.get("prior_xi_std", 0.5)),
        prior_tau_std=float(sub.get("prior_tau_std", 5.0)),
        prior_s_std=float(sub.get("prior_s_std", 1.0)),
        theta_lr=float(sub.get("theta_lr", 5.0)),
        n_mh_per_block=int(sub.get("n_mh_per_block", 2)),
    )


def _personalize_config(cfg: dict, seed):
    sub = cfg.get("personalize", {})
    kwargs = {"seed": seed}
    for key in ("max_evals", "n_restarts"):
        if key in sub:
            kwargs[key] = int(sub[key])
    if "grad_tol" in sub:
        kwargs["grad_tol"] = float(sub["grad_tol"])
    if "bounds" in sub:
        kwargs["bounds"] = {k: tuple(v) for k, v in sub["bounds"].items()}
    return PersonalizeConfig(**kwargs)


def _train_config(cfg: dict, seed):
    sub = cfg.get("train", {})
    return TrainConfig(
        learning_rate=float(sub.get("learning_rate", 1e-3)),
        weight_decay=float(sub.get("weight_decay", 1e-5)),
        batch_size=int(sub.get("batch_size", 32)),
        max_epochs=int(sub.get("max_epochs", 1000)),
        patience=int(sub.get("patience", 20)),
        hidden_dim=int(sub.get("hidden_dim", 10)),
        seed=seed,
    )


def _load_model(path) -> FixedEffects:
    with open(path) as fh:
        return theta_from_json(json.load(fh))


def cmd_synth(cfg, out_dir, seed):
    t = _require(cfg, "theta")
    theta = FixedEffects(
        t0=float(_require(t, "t0")),
        rho=np.array(_require(t, "rho"), dtype=float),
        delta=np.array(_require(t, "delta"), dtype=float),
        A=np.array(_require(t, "A"), dtype=float),
        sigma=float(_require(t, "sigma")),
        prior_xi_std=float(t.get("prior_xi_std", 0.5)),
        prior_tau_std=float(t.get("prior_tau_std", 5.0)),
        prior_s_std=float(t.get("prior_s_std", 1.0)),
    )
    p = cfg.get("plan", {})
    plan = VisitPlan(
        baseline_age_range=tuple(p.get("baseline_age_range", (65.0, 78.0))),
        n_visits_choices=tuple(p.get("n_visits_choices", (6,))),
        n_visits_probs=tuple(p.get("n_visits_probs", ())),
        spacing=float(p.get("spacing", 1.0)),
    )
    ds = synth_cohort(
        theta,
        int(_require(cfg, "n_patients")),
        plan,
        float(cfg.get("missing_rate", 0.0)),
        np.random.default_rng(seed),
    )
    out = os.path.join(out_dir, cfg.get("output", "cohort.csv"))
    save_dataset(ds, out)
    print(f"wrote {len(ds)} patients to {out}")


def cmd_calibrate(cfg, out_dir, seed):
    specs = _feature_specs(cfg)
    ds = load_dataset(_require(cfg, "data_csv"), specs)
    result = calibrate(ds, _saem_config(cfg, seed))
    out = os.path.join(out_dir, cfg.get("output", "model.json"))
    write_json(result.to_json(ds.feature_names), out)
    print(f"calibrated on {len(ds)} patients; sigma={result.theta.sigma:.5f}; "
          f"wrote {out}")


def cmd_personalize(cfg, out_dir, seed):
    specs = _feature_specs(cfg)
    ds = load_dataset(_require(cfg, "data_csv"), specs)
    theta = _load_model(_require(cfg, "model_json"))
    results = batch_personalize(ds, theta, _personalize_config(cfg, seed))
    out = os.path.join(out_dir, cfg.get("output", "random_effects.json"))
    write_json(results_to_json(results), out)
    n_fallback = sum(r.fallback for r in results.values())
    print(f"personalized {len(results)} patients ({n_fallback} fallbacks); "
          f"wrote {out}")


def cmd_simulate(cfg, out_dir, seed):
    theta = _load_model(_require(cfg, "model_json"))
    with open(_require(cfg, "random_effects_json")) as fh:
        doc = json.load(fh)
    fitted = [
        RandomEffects(xi=float(e["xi"]), tau=float(e["tau"]),
                      s=np.array(e["s"], dtype=float))
        for e in doc["patients"].values()
    ]
    sub = cfg.get("simulation", {})
    if "data_csv" in cfg:
        specs = _feature_specs(cfg)
        real = load_dataset(cfg["data_csv"], specs)
        ages = tuple(float(p.visits[0].age) for p in real.patients)
        names, meta = real.feature_names, real.feature_meta
    else:
        ages = tuple(sub.get("first_visit_ages", ()))
        names, meta = None, ()
    sim_cfg = SimulationConfig(
        n_patients=int(_require(sub, "n_patients")),
        visits_per_patient=int(sub.get("visits_per_patient", 6)),
        visit_spacing=float(sub.get("visit_spacing", 1.0)),
        first_visit_ages=ages,
        add_noise=bool(sub.get("add_noise", True)),
        seed=seed,
    )
    ds = simulate_cohort(theta, fitted, sim_cfg, feature_names=names,
                         feature_meta=meta)
    out = os.path.join(out_dir, cfg.get("output", "simulated.csv"))
    save_dataset(ds, out)
    print(f"simulated {len(ds)} patients; wrote {out}")


def cmd_split(cfg, out_dir, seed):
    specs = _feature_specs(cfg)
    ds = load_dataset(_require(cfg, "data_csv"), specs)
    result = split_delta_t(
        ds,
        float(_require(cfg, "delta_t")),
        float(cfg.get("tolerance", 0.25)),
        _feature_index(cfg, specs),
        np.random.default_rng(seed),
    )
    out = os.path.join(out_dir, cfg.get("output", "split_manifest.json"))
    write_manifest(result, out)
    print(f"{len(result.pairs)} pairs, {len(result.discarded_ids)} discarded; "
          f"wrote {out}")


def cmd_train(cfg, out_dir, seed):
    specs = _feature_specs(cfg)
    ds = load_dataset(_require(cfg, "data_csv"), specs)
    rng = np.random.default_rng(seed)
    result = split_delta_t(
        ds,
        float(_require(cfg, "delta_t")),
        float(cfg.get("tolerance", 0.25)),
        _feature_index(cfg, specs),
        rng,
    )
    pairs = list(result.pairs)
    if len(pairs) < 2:
        raise DataError("need at least two prediction pairs to train")
    val_fraction = float(cfg.get("validation_fraction", 0.2))
    order = rng.permutation(len(pairs))
    n_val = max(1, int(np.floor(val_fraction * len(pairs))))
    val = [pairs[i] for i in order[:n_val]]
    tr = [pairs[i] for i in order[n_val:]]
    params, history = train(tr, val, _train_config(cfg, seed), d=ds.n_features)
    ckpt = os.path.join(out_dir, cfg.get("output", "checkpoint.json"))
    write_json(params.to_json(), ckpt)
    history_to_csv(history, os.path.join(out_dir, "history.csv"))
    best = min(h["val_mse"] for h in history)
    print(f"trained on {len(tr)} pairs, best val MSE {best:.6f}; wrote {ckpt}")


def cmd_evaluate(cfg, out_dir, seed):
    specs = _feature_specs(cfg)
    real = load_dataset(_require(cfg, "real_csv"), specs)
    sim = load_dataset(_require(cfg, "simulated_csv"), specs)
    report = distribution_report(real, sim)
    out = os.path.join(out_dir, cfg.get("output", "distribution_report.json"))
    write_json(report, out)
    ks = {n: f["ks"] for n, f in report["features"].items() if not f.get("absent")}
    print(f"KS per feature: {ks}; wrote {out}")


def cmd_experiment(cfg, out_dir, seed):
    specs = _feature_specs(cfg)
    ds = load_dataset(_require(cfg, "data_csv"), specs)
    sub = cfg.get("experiment", {})
    exp_cfg = ExperimentConfig(
        mode=_require(sub, "mode"),
        delta_t=float(_require(sub, "delta_t")),
        target_feature_index=_feature_index(cfg, specs),
        tolerance=float(sub.get("tolerance", 0.25)),
        test_fraction=float(sub.get("test_fraction", 0.5)),
        validation_fraction=float(sub.get("validation_fraction", 0.1)),
        n_simulated_patients=int(sub.get("n_simulated_patients", 500)),
        simulated_visits_per_patient=int(sub.get("simulated_visits_per_patient", 8)),
        visit_spacing=float(sub.get("visit_spacing", 1.0)),
        add_simulation_noise=bool(sub.get("add_simulation_noise", True)),
        n_runs=int(sub.get("n_runs", 10)),
        seed=seed,
        saem=_saem_config(cfg, seed),
        personalize=_personalize_config(cfg, seed),
        train=_train_config(cfg, seed),
        strict_guard=bool(sub.get("strict_guard", True)),
    )
    noise_band = tuple(cfg.get("noise_band", (0.035, 0.074)))
    if "sweep_sizes" in cfg:
        sizes, reports = run_simulated_size_sweep(
            ds, exp_cfg, sizes=tuple(cfg["sweep_sizes"])
        )
        doc = {"version": 1, "sweep_sizes": sizes,
               "reports": [r.to_json() for r in reports]}
        write_json(doc, os.path.join(out_dir, "sweep_report.json"))
        reports_to_tidy_csv(reports, os.path.join(out_dir, "runs.csv"))
        means = {s: r.mean_mae for s, r in zip(sizes, reports)}
        print(f"sweep mean MAE by size: {means}")
    else:
        report = run_experiment(ds, exp_cfg, noise_band=noise_band)
        write_json(report.to_json(), os.path.join(out_dir, "report.json"))
        reports_to_tidy_csv([report], os.path.join(out_dir, "runs.csv"))
        print(f"{report.mode} ΔT={report.delta_t}: "
              f"MAE {report.mean_mae:.4f} ± {report.std_mae:.4f} "
              f"(baseline {report.baseline_mae}, "
              f"sizes {report.train_size}/{report.test_size})")


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "personalize": cmd_personalize,
    "simulate": cmd_simulate,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cohortsim",
        description="Virtual-cohort simulation and augmented sequence prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads (best effort)")
    return parser


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        print(f"config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as e:
        print(f"config is not valid JSON: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.threads:
        _limit_threads(args.threads)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    os.makedirs(args.out_dir, exist_ok=True)

    try:
        COMMANDS[args.command](cfg, args.out_dir, seed)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CalibrationError, NumericalError, TrainingError,
            np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

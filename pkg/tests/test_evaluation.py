import json

import numpy as np
import pytest

from cohortsim.evaluation import (
    ExperimentConfig,
    VisitPlan,
    atomic_write,
    baseline_mae,
    constant_baseline,
    distribution_report,
    ks_statistic,
    mae,
    noise_floor,
    synth_cohort,
    write_json,
)
from cohortsim.model import Dataset, FixedEffects, PatientSeries, Visit, eval_trajectory, RandomEffects
from cohortsim.pipeline import PredictionPair


def theta_star(sigma=0.05):
    return FixedEffects(
        t0=72.0,
        rho=np.array([0.30, 0.22, 0.38, 0.27]),
        delta=72.0 + np.array([-2.0, 1.5, 0.5, -1.0]),
        A=np.array([[0.3, -0.2], [0.1, 0.4], [-0.3, 0.2], [0.2, 0.1]]),
        sigma=sigma,
        prior_xi_std=0.4,
        prior_tau_std=5.0,
        prior_s_std=1.0,
    )


class TestMae:
    def test_identical(self):
        assert mae([0.1, 0.2], [0.1, 0.2]) == 0.0

    def test_arithmetic(self):
        assert mae([0.2, 0.4], [0.1, 0.7]) == pytest.approx(0.2)

    def test_matches_naive_two_pass(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0, 1, 1000)
        t = rng.uniform(0, 1, 1000)
        total = 0.0
        for a, b in zip(p, t):
            total += abs(a - b)
        assert mae(p, t) == pytest.approx(total / 1000, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mae([0.1], [0.1, 0.2])


class TestConstantBaseline:
    def make_pair(self, feature_values, masks, target=0.5):
        visits = [
            Visit(70.0 + j, np.atleast_1d(v), np.atleast_1d(m))
            for j, (v, m) in enumerate(zip(feature_values, masks))
        ]
        return PredictionPair("p", visits, target_age=visits[-1].age + 2.0,
                              target_value=target, target_feature_index=0,
                              delta_t=2.0)

    def test_last_observed(self):
        pair = self.make_pair([[0.2], [0.3]], [[True], [True]])
        assert constant_baseline(pair) == pytest.approx(0.3)

    def test_single_visit(self):
        pair = self.make_pair([[0.7]], [[True]])
        assert constant_baseline(pair) == pytest.approx(0.7)

    def test_skips_masked_tail(self):
        pair = self.make_pair([[0.2, 0.9], [0.9, 0.1]],
                              [[True, True], [False, True]])
        assert constant_baseline(pair) == pytest.approx(0.2)

    def test_never_observed_excluded(self):
        pair = self.make_pair([[0.9, 0.4]], [[False, True]])
        assert constant_baseline(pair) is None
        val, excluded = baseline_mae([pair])
        assert val is None and excluded == 1

    def test_fixture_baseline_mae(self):
        pairs = [
            self.make_pair([[0.2], [0.3]], [[True], [True]], target=0.5),
            self.make_pair([[0.6]], [[True]], target=0.4),
        ]
        val, excluded = baseline_mae(pairs)
        assert excluded == 0
        assert val == pytest.approx((abs(0.3 - 0.5) + abs(0.6 - 0.4)) / 2)


class TestNoiseFloor:
    def test_reported_values(self):
        assert noise_floor(1.3, 30) == pytest.approx(0.0346, abs=5e-4)
        assert noise_floor(2.8, 30) == pytest.approx(0.0745, abs=5e-4)

    def test_zero(self):
        assert noise_floor(0, 30) == 0.0

    def test_exact_identity(self):
        sigma = 0.123
        assert noise_floor(sigma * 30, 30) == pytest.approx(
            sigma * np.sqrt(2 / np.pi), abs=1e-15
        )


def single_feature_dataset(values, name="f0"):
    patients = [
        PatientSeries(f"p{i}", [Visit(70.0, np.array([v]), np.array([True]))])
        for i, v in enumerate(values)
    ]
    return Dataset(patients, [name])


class TestDistributionReport:
    def test_identical_zero_ks(self):
        ds = single_feature_dataset(np.linspace(0.1, 0.9, 40))
        rep = distribution_report(ds, ds)
        assert rep["features"]["f0"]["ks"] == 0.0

    def test_disjoint_supports(self):
        a = single_feature_dataset(np.linspace(0.0, 0.4, 30))
        b = single_feature_dataset(np.linspace(0.6, 1.0, 30))
        rep = distribution_report(a, b)
        assert rep["features"]["f0"]["ks"] == pytest.approx(1.0)

    def test_ks_matches_brute_force(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, 57)
        b = np.clip(rng.normal(0.5, 0.2, 43), 0, 1)
        got = ks_statistic(a, b)
        # brute-force sup over all pooled thresholds
        best = 0.0
        for thr in np.concatenate([a, b]):
            ca = np.mean(a <= thr)
            cb = np.mean(b <= thr)
            best = max(best, abs(ca - cb))
        assert got == pytest.approx(best, abs=1e-12)

    def test_absent_feature_reported(self):
        v1 = Visit(70.0, np.array([0.5, 0.1]), np.array([True, False]))
        real = Dataset([PatientSeries("a", [v1])], ["x", "y"])
        rep = distribution_report(real, real)
        assert rep["features"]["y"]["absent"]

    def test_histogram_bin_count(self):
        ds = single_feature_dataset(np.linspace(0, 1, 50))
        rep = distribution_report(ds, ds)
        assert len(rep["features"]["f0"]["real_histogram"]) == 30
        assert len(rep["bin_edges"]) == 31


class TestSynthCohort:
    def test_rate_zero_fully_observed(self):
        ds = synth_cohort(theta_star(), 20, VisitPlan(), 0.0,
                          np.random.default_rng(0))
        for p in ds.patients:
            for v in p.visits:
                assert v.mask.all()

    def test_sigma_zero_on_trajectory(self):
        theta = theta_star(sigma=0.05)
        noiseless = FixedEffects(theta.t0, theta.rho, theta.delta, theta.A,
                                 1e-12, theta.prior_xi_std, theta.prior_tau_std,
                                 theta.prior_s_std)
        rng = np.random.default_rng(1)
        ds = synth_cohort(noiseless, 5, VisitPlan(), 0.0, rng)
        # values at consecutive visits strictly increase (pure trajectories)
        for p in ds.patients:
            mat = np.stack([v.values for v in p.visits])
            assert np.all(np.diff(mat, axis=0) > 0)

    def test_every_visit_keeps_an_observation(self):
        ds = synth_cohort(theta_star(), 50, VisitPlan(), 0.8,
                          np.random.default_rng(2))
        for p in ds.patients:
            for v in p.visits:
                assert v.mask.any()

    def test_noise_mad_identity(self):
        theta = theta_star(sigma=0.04)
        rng = np.random.default_rng(3)
        plan = VisitPlan(baseline_age_range=(70.0, 74.0), n_visits_choices=(6,))
        n = 3000  # ~ 7e4 scalar values
        ds = synth_cohort(theta, n, plan, 0.0, rng)
        # regenerate the same z draws to get noiseless references
        rng2 = np.random.default_rng(3)
        resid = []
        for p in ds.patients:
            z = RandomEffects(
                rng2.normal(0, theta.prior_xi_std),
                rng2.normal(0, theta.prior_tau_std),
                rng2.normal(0, theta.prior_s_std, 2),
            )
            ages = plan.draw(rng2)
            clean = eval_trajectory(theta, z, ages)
            rng2.normal(0.0, theta.sigma, clean.shape)  # consume noise draws
            for v, row in zip(p.visits, clean):
                rng2.uniform(size=4)  # consume mask draws
                # keep residuals unaffected by the [0,1] clipping
                safe = (row > 5 * theta.sigma) & (row < 1 - 5 * theta.sigma)
                resid.extend(np.abs(v.values - row)[safe])
        assert len(resid) > 20_000
        got = np.mean(resid)
        expected = theta.sigma * np.sqrt(2 / np.pi)
        assert abs(got - expected) / expected < 0.02


class TestExperimentConfig:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(mode="wat", delta_t=2.0)

    def test_runs_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(mode="standard", delta_t=2.0, n_runs=0)


class TestAtomicWrite:
    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "doc.json"
        write_json({"a": 1}, path)
        assert json.loads(path.read_text()) == {"a": 1}

    def test_no_partial_file_on_error(self, tmp_path):
        path = tmp_path / "doc.json"
        with pytest.raises(RuntimeError):
            with atomic_write(path) as fh:
                fh.write("partial")
                raise RuntimeError("boom")
        assert not path.exists()
        assert list(tmp_path.iterdir()) == []

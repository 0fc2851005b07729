"""Tests for replications, rate fits and experiment runs."""
import math
from dataclasses import replace

import numpy as np
import pytest

from kmtq import dist
from kmtq.config import ExperimentConfig, default_config
from kmtq.harness import (
    LadderRecord,
    Replication,
    _iid_statistics,
    correction_factor,
    fit_rate,
    h_variance_check,
    kmt_ratio_check,
    load_records,
    run_coupled_replication,
    run_experiment,
    variance_check,
)
from kmtq.queries import errors_by_n, median_by_n, metrics_of, quantile_by_n
from kmtq.storage import InvariantError, ParameterError

QUEUE_METRICS = ("arrival", "workload", "remaining-workload", "queue")


def small_config(tmp_path, **changes):
    """Fast settings: short ladder, few replications, coarse grid."""
    base = ExperimentConfig(ladder=(8, 16, 32), replications=3, delta=1 / 512, out=tmp_path / "out",
                            seed=11)
    return replace(base, **changes)


def synthetic_records(error_of_n, ns=(64, 128, 256, 512, 1024), metric="arrival"):
    return [LadderRecord(n, rep, metric, error_of_n(n), 0.0, 1) for n in ns for rep in range(3)]


class TestRunCoupledReplication:
    def test_single_customer_smoke(self, tmp_path):
        """n=1 runs end to end and gives one record per metric."""
        records = run_coupled_replication(small_config(tmp_path), 1, 0, QUEUE_METRICS)

        assert [r.metric for r in records] == list(QUEUE_METRICS)
        assert all(r.error >= 0 for r in records)

    def test_rerun_is_identical(self, tmp_path):
        """Fixed seed: same errors on every run."""
        config = small_config(tmp_path)

        first = run_coupled_replication(config, 16, 2, QUEUE_METRICS)
        second = run_coupled_replication(config, 16, 2, QUEUE_METRICS)

        assert [r.error for r in first] == [r.error for r in second]

    def test_deterministic_service_scales_arrival_error(self, tmp_path):
        """p=1 and sigma=0: the workload error is mu times the arrival error."""
        config = small_config(tmp_path, p=1.0, service=dist.deterministic(1.5))

        arrival, workload = run_coupled_replication(config, 32, 0, ("arrival", "workload"))

        assert workload.error == pytest.approx(1.5 * arrival.error, rel=1e-9)

    def test_all_metrics(self, tmp_path):
        """Every metric yields a finite non-negative error."""
        from kmtq.config import METRICS

        records = run_coupled_replication(small_config(tmp_path), 16, 0, METRICS)

        assert len(records) == len(METRICS)
        assert all(math.isfinite(r.error) and r.error >= 0 for r in records)

    def test_metric_order_does_not_change_errors(self, tmp_path):
        """Metrics that refine the shared drivers give the same errors in any listed order."""
        config = small_config(tmp_path)
        metrics = ("arrival", "timechange", "empirical", "service-walk", "queue")

        forward = run_coupled_replication(config, 32, 1, metrics)
        backward = run_coupled_replication(config, 32, 1, tuple(reversed(metrics)))

        assert [r.metric for r in backward] == list(reversed(metrics))
        assert {r.metric: r.error for r in forward} == {r.metric: r.error for r in backward}

    def test_unknown_metric(self, tmp_path):
        with pytest.raises(ParameterError):
            run_coupled_replication(small_config(tmp_path), 8, 0, ("latency",))

    def test_negative_error_rejected(self):
        with pytest.raises(InvariantError):
            LadderRecord(8, 0, "arrival", -1.0, 0.0, 1)


class TestReplication:
    def test_queue_and_approximants_share_drivers(self, tmp_path):
        """The trace and H_n both come from the one cached sample and its Brownian drivers."""
        r = Replication(small_config(tmp_path), 16, 0)
        s = r.sample
        H = r.approximants.H
        t = H.knots[H.knots <= 1.0]

        expected = 16 * s.p * t + 4 * (s.p * np.asarray(s.bridge.at(t))
                                       + math.sqrt(s.p * (1 - s.p)) * np.asarray(s.dropout_bm.at(t)))

        assert r.sample is s
        assert r.trace.accepted == s.accepted
        np.testing.assert_allclose(H.at(t), expected, rtol=1e-9, atol=1e-9)


class TestFitRate:
    def test_quarter_slope(self):
        """error = n^(1/4) sqrt(log n) fits slope 1/4 after the sqrt-log-n correction."""
        records = synthetic_records(lambda n: n ** 0.25 * math.sqrt(math.log(n)))

        fit = fit_rate(records, "arrival", "sqrt-log-n")

        assert fit.slope == pytest.approx(0.25, abs=1e-10)
        assert fit.points == 5

    def test_flat_after_log_correction(self):
        """error = log n fits slope 0 after the log-n correction."""
        fit = fit_rate(synthetic_records(math.log), "arrival", "log-n")

        assert fit.slope == pytest.approx(0.0, abs=1e-10)

    def test_sqrt_log_cn(self):
        """c_n-based correction uses the supplied rule."""
        records = synthetic_records(lambda n: n ** 0.25 * math.sqrt(math.log(n * n)))

        fit = fit_rate(records, "arrival", "sqrt-log-cn", c_of_n=lambda n: n * n)

        assert fit.slope == pytest.approx(0.25, abs=1e-10)

    def test_needs_three_points(self):
        records = synthetic_records(math.log, ns=(64, 128))
        with pytest.raises(ParameterError):
            fit_rate(records, "arrival", "none")

    def test_unknown_correction(self):
        with pytest.raises(ParameterError):
            correction_factor("cube-root", 64)
        with pytest.raises(ParameterError):
            correction_factor("sqrt-log-cn", 64)


class TestQueries:
    def test_aggregation_ignores_record_order(self):
        """Statistics are computed after sorting."""
        records = [LadderRecord(8, r, "arrival", e, 0.0, 1) for r, e in enumerate([3.0, 1.0, 2.0])]

        assert errors_by_n(records, "arrival")[8].tolist() == [1.0, 2.0, 3.0]
        assert median_by_n(records, "arrival") == {8: 2.0}
        assert median_by_n(list(reversed(records)), "arrival") == {8: 2.0}
        assert quantile_by_n(records, "arrival", 1.0) == {8: 3.0}
        assert metrics_of(records) == ["arrival"]


class TestKmtRatioCheck:
    def test_log_scaled_medians_pass(self):
        """m(n) proportional to log n passes."""
        records = synthetic_records(lambda n: 2 * math.log(n), metric="kmt-empirical")

        assert kmt_ratio_check(records).passed

    def test_runaway_medians_fail(self):
        """m(n) growing like n fails."""
        records = synthetic_records(lambda n: float(n), metric="kmt-empirical")

        assert not kmt_ratio_check(records).passed


class TestVarianceCheck:
    def test_matching_variance_passes(self):
        values = np.random.default_rng(5).normal(0.0, math.sqrt(14.56), 1000)

        assert variance_check("h-variance", values, 14.56).passed

    def test_thirty_percent_shortfall_fails(self):
        """Var 10.05 against 14.56 is far outside 3 standard errors at 1000 replications."""
        values = np.random.default_rng(5).normal(0.0, math.sqrt(10.05), 1000)

        assert not variance_check("h-variance", values, 14.56).passed

    def test_too_few_values_skip(self):
        check = variance_check("h-variance", [1.0], 2.0)

        assert check.passed
        assert "skipped" in check.detail

    def test_h_half_variance(self, tmp_path):
        """Var H_n(1/2) = n[p^2 G(1-G) + p(1-p) G] on coupled samples."""
        check = h_variance_check(small_config(tmp_path), n=8, replications=400)

        assert check.passed, check.detail
        assert check.detail.startswith("n=8")


class TestIidStatistics:
    def test_deterministic_service_has_no_deviation(self, tmp_path):
        config = small_config(tmp_path, service=dist.deterministic(2.0), bound_n=20, bound_replications=50)

        maxima, dkw = _iid_statistics(config)

        assert maxima.shape == (50,)
        assert np.all(maxima == 0.0)
        assert np.all((dkw > 0) & (dkw <= 1))

    def test_exponential_maxima_are_normalised(self, tmp_path):
        """max_k |S_k - k mu| / n is of order 1/sqrt(n)."""
        config = small_config(tmp_path, service=dist.exponential(1.0), bound_n=50, bound_replications=200)

        maxima, _ = _iid_statistics(config)

        assert np.all(maxima >= 0)
        assert 0 < np.median(maxima) < 1


class TestRunExperiment:
    def test_ladder_writes_reports(self, tmp_path):
        """A ladder run writes records, fit and summary."""
        config = small_config(tmp_path)

        report = run_experiment(config)

        out = tmp_path / "out"
        assert (out / "records.csv").exists()
        assert (out / "fit.csv").exists()
        summary = (out / "summary.txt").read_text()
        assert "Overall:" in summary
        assert len(report.records) == 9
        assert len(report.fits) == 1
        assert report.acceptance

    def test_records_reload(self, tmp_path):
        """records.csv reloads to the same errors."""
        report = run_experiment(small_config(tmp_path))

        loaded = load_records(tmp_path / "out" / "records.csv")

        assert [r.error for r in loaded] == [r.error for r in report.records]

    def test_parallel_matches_inline(self, tmp_path):
        """Worker count does not change the records."""
        inline = run_experiment(small_config(tmp_path, out=tmp_path / "a"))
        pooled = run_experiment(small_config(tmp_path, out=tmp_path / "b", jobs=2))

        assert [r.error for r in inline.records] == [r.error for r in pooled.records]

    def test_simulation(self, tmp_path):
        """simulate-only writes the sample, trace and approximants and checks the queue identity."""
        config = replace(default_config("simulate-only"), ladder=(32,), out=tmp_path / "sim",
                         delta=1 / 512)

        report = run_experiment(config)

        sim = tmp_path / "sim"
        for name in ("sample.csv", "trace_Q.csv", "queue_summary.csv", "approximants.csv",
                     "driver_bridge.csv", "driver_service.csv", "summary.txt"):
            assert (sim / name).exists()
        assert report.passed

    def test_bound_validation(self, tmp_path):
        """validate-bounds writes one row per check."""
        config = replace(default_config("validate-bounds"), ladder=(8, 16), replications=5,
                         bound_n=20, bound_replications=200, delta=1 / 512, out=tmp_path / "b")

        report = run_experiment(config)

        assert (tmp_path / "b" / "bounds.csv").exists()
        assert report.checks
        assert {c.name for c in report.checks} >= {"classical-dkw", "arrival-fluid", "renewal-fluid"}

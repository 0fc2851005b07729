"""Experiment orchestration: coupled-error ladders, rate fits, bound validation."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from scipy import stats

from kmtq import bounds, dist, rng
from kmtq.approx import (
    build_approximants,
    build_H,
    reflected_workload,
    shared_grid,
    write_approximants_csv,
)
from kmtq.config import ExperimentConfig
from kmtq.display import format_summary
from kmtq.kmt import (
    build_coupled_sample,
    empirical_coupling_error,
    write_driver_csv,
    write_sample_csv,
)
from kmtq.paths import sup_distance
from kmtq.queries import errors_by_n, median_by_n, metrics_of, quantile_by_n
from kmtq.queue import (
    QueueInputs,
    arrivals_path,
    default_horizon,
    remaining_workload,
    simulate,
    truncated_renewal,
    write_summary_csv,
    write_trace_csv,
)
from kmtq.storage import (
    InvariantError,
    ParameterError,
    UnsupportedFamilyError,
    error,
    read_csv,
    warn,
    write_csv,
    write_text,
)

RECORD_HEADER = ["n", "rep", "metric", "error", "runtime_ms", "seed"]
FIT_HEADER = ["metric", "correction", "slope", "intercept", "stderr", "points"]

SUBEXP_T_GRID = tuple(np.round(np.linspace(0.05, 0.6, 12), 4))
DKW_EPS_GRID = (0.05, 0.075, 0.1, 0.125, 0.15, 0.2)
KMT_X_GRID = (0.0, 50.0, 100.0, 200.0)
FLUID_EPS_GRID = (0.02, 0.05, 0.1, 0.15)
TIMECHANGE_X_GRID = (0.05, 0.1, 0.2, 0.3)

# Bound on max m(n)/log n over min m(n)/log n along the KMT ladder.
KMT_RATIO_LIMIT = 4.0

# Replications behind the Var H_n(1/2) check: 3 standard errors is about 13% of the variance.
H_VARIANCE_REPLICATIONS = 1000


@dataclass(frozen=True)
class LadderRecord:
    n: int
    rep: int
    metric: str
    error: float
    runtime_ms: float
    seed: int

    def __post_init__(self):
        if not self.error >= 0:
            raise InvariantError(f"Negative sup-norm error {self.error} for {self.metric} at n={self.n}")

    def row(self) -> list:
        return [self.n, self.rep, self.metric, float(self.error), round(float(self.runtime_ms), 3), self.seed]


@dataclass(frozen=True)
class RateFit:
    metric: str
    correction: str
    slope: float
    intercept: float
    stderr: float
    points: int

    def row(self) -> list:
        return [self.metric, self.correction, self.slope, self.intercept, self.stderr, self.points]


@dataclass(frozen=True)
class AcceptanceCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentReport:
    kind: str
    records: list[LadderRecord] = field(default_factory=list)
    fits: list[RateFit] = field(default_factory=list)
    checks: list[bounds.BoundCheck] = field(default_factory=list)
    acceptance: list[AcceptanceCheck] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.acceptance)


class Replication:
    """One (n, rep) cell: sample, queue and approximants, built on first use.

    The driver paths refine lazily, so which metrics are evaluated changes which
    points get drawn. run_coupled_replication evaluates metrics in METRIC_FUNCS
    order, which makes the errors independent of the order they are requested in.
    """

    def __init__(self, config: ExperimentConfig, n: int, rep: int):
        self.config = config
        self.n = n
        self.rep = rep

    @cached_property
    def c_n(self) -> float:
        return self.config.c_n(self.n)

    @cached_property
    def sample(self):
        cfg = self.config
        sample = build_coupled_sample(self.n, cfg.p, cfg.arrival_for(self.n), cfg.service,
                                      cfg.seed, self.rep)
        for message in sample.diagnostics:
            warn(f"n={self.n} rep={self.rep}: {message}")
        return sample

    @cached_property
    def inputs(self) -> QueueInputs:
        s = self.sample
        return QueueInputs(self.n, s.p, s.arrival, s.service, self.c_n)

    @cached_property
    def horizon(self) -> float:
        return default_horizon(self.sample, self.c_n)

    @cached_property
    def resolution(self) -> float:
        return self.config.delta * self.horizon

    @cached_property
    def grid(self) -> np.ndarray:
        return shared_grid(self.sample, self.horizon, self.resolution)

    @cached_property
    def trace(self):
        return simulate(self.inputs, self.sample, self.horizon)

    @cached_property
    def approximants(self):
        return build_approximants(self.sample, self.c_n, self.grid)


def _arrival_error(r: Replication) -> float:
    return sup_distance(r.trace.A, r.approximants.H, r.resolution)


def _workload_error(r: Replication) -> float:
    return sup_distance(r.trace.W, r.approximants.R, r.resolution)


def _remaining_workload_error(r: Replication) -> float:
    exact = remaining_workload(r.trace, r.c_n)
    return sup_distance(exact, reflected_workload(r.approximants.R, r.c_n), r.resolution)


def _queue_error(r: Replication) -> float:
    return sup_distance(r.trace.Q, r.approximants.queue_length, r.resolution)


def _empirical_error(r: Replication) -> float:
    """sup_t |sqrt(n)(G_n(t) - G(t)) - B^br_G(t)|."""
    s = r.sample
    ecdf = dist.empirical_cdf(s.T)
    ts = np.unique(np.concatenate([r.grid, s.T]))
    g = np.asarray(dist.cdf(s.arrival, ts), dtype=float)
    b = np.asarray(s.bridge.at(g), dtype=float)
    root = math.sqrt(s.n)
    right = np.abs(root * (np.asarray(ecdf(ts)) - g) - b)
    left = np.abs(root * (np.asarray(ecdf.left(ts)) - g) - b)
    return float(max(right.max(), left.max()))


def _timechange_error(r: Replication) -> float:
    """sup_t |B_{A_n(t)/n} - B_{pG(t)}| for the service motion B."""
    s = r.sample
    A = arrivals_path(s, r.horizon)
    ts = np.unique(np.concatenate([r.grid, A.knots]))
    target = np.asarray(s.service_bm.at(s.p * np.asarray(dist.cdf(dist.limit_cdf(s.arrival), ts))))
    right = np.asarray(s.service_bm.at(np.asarray(A.at(ts)) / s.n))
    left = np.asarray(s.service_bm.at(np.asarray(A.left_at(ts)) / s.n))
    return float(max(np.abs(right - target).max(), np.abs(left - target).max()))


def _service_walk_error(r: Replication) -> float:
    """sup_k |sum_{i<=k} (V_i - mu) - sigma sqrt(n) B_{k/n}|."""
    s = r.sample
    k = np.arange(1, s.n + 1)
    walk = np.cumsum(s.V - s.service.mean)
    b = np.asarray(s.service_bm.at(k / s.n), dtype=float)
    return float(np.abs(walk - s.service.sd * math.sqrt(s.n) * b).max())


def _kmt_empirical_error(r: Replication) -> float:
    return empirical_coupling_error(r.sample.uniforms, r.sample.bridge, r.config.delta)


METRIC_FUNCS = {
    "arrival": _arrival_error,
    "workload": _workload_error,
    "remaining-workload": _remaining_workload_error,
    "queue": _queue_error,
    "empirical": _empirical_error,
    "timechange": _timechange_error,
    "service-walk": _service_walk_error,
    "kmt-empirical": _kmt_empirical_error,
}


def run_coupled_replication(config: ExperimentConfig, n: int, rep: int,
                            metrics: tuple[str, ...] | None = None) -> list[LadderRecord]:
    """Sup-norm coupling errors of one replication, one record per metric."""
    wanted = config.metrics if metrics is None else metrics
    unknown = [m for m in wanted if m not in METRIC_FUNCS]
    if unknown:
        error(f"Unknown metric: {unknown[0]}", ParameterError)
    start = time.perf_counter()
    r = Replication(config, n, rep)
    errors = {m: func(r) for m, func in METRIC_FUNCS.items() if m in wanted}
    runtime = (time.perf_counter() - start) * 1000
    return [LadderRecord(n, rep, m, errors[m], runtime, config.seed) for m in wanted]


def _replicate(task) -> list[LadderRecord]:
    config, n, rep = task
    return run_coupled_replication(config, n, rep)


def _fan_out(func, tasks: list, jobs: int) -> list:
    """Map over tasks inline or on a worker pool; result order follows tasks."""
    if jobs <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    chunk = max(1, len(tasks) // (jobs * 4))
    with Pool(jobs) as pool:
        return pool.map(func, tasks, chunksize=chunk)


def correction_factor(correction: str, n: int, c_n: float | None = None) -> float:
    if correction == "sqrt-log-n":
        return math.sqrt(math.log(n))
    if correction == "log-n":
        return math.log(n)
    if correction == "none":
        return 1.0
    if correction == "sqrt-log-cn":
        if c_n is None or c_n <= 1:
            error(f"sqrt-log-cn correction needs c_n > 1 (n={n}, c_n={c_n})", ParameterError)
        return math.sqrt(math.log(c_n))
    error(f"Unknown correction: {correction}", ParameterError)


def fit_rate(records: list[LadderRecord], metric: str, correction: str,
             c_of_n=None) -> RateFit:
    """Least squares of log(median error / correction(n)) on log n."""
    medians = {n: m for n, m in median_by_n(records, metric).items() if m > 0}
    if len(medians) < 3:
        error(f"Rate fit for {metric} needs at least 3 ladder points with positive error, "
              f"got {len(medians)}", ParameterError)
    ns = np.array(sorted(medians), dtype=float)
    ys = np.array([math.log(medians[n] / correction_factor(
        correction, n, c_of_n(n) if c_of_n else None)) for n in sorted(medians)])
    res = stats.linregress(np.log(ns), ys)
    return RateFit(metric, correction, float(res.slope), float(res.intercept),
                   float(res.stderr), len(ns))


def kmt_ratio_check(records: list[LadderRecord]) -> AcceptanceCheck:
    """m(n)/log n stays within a factor KMT_RATIO_LIMIT across the ladder."""
    ratios = {n: m / math.log(n) for n, m in median_by_n(records, "kmt-empirical").items()}
    if not ratios:
        return AcceptanceCheck("kmt-ratio", False, "no kmt-empirical records")
    hi, lo = max(ratios.values()), min(ratios.values())
    passed = hi <= KMT_RATIO_LIMIT * lo
    return AcceptanceCheck("kmt-ratio", passed, f"max m/log n = {hi:.4g}, min = {lo:.4g}")


def records_from_rows(rows: list[dict]) -> list[LadderRecord]:
    """Parse records.csv rows."""
    try:
        return [LadderRecord(int(r["n"]), int(r["rep"]), r["metric"], float(r["error"]),
                             float(r["runtime_ms"]), int(r["seed"])) for r in rows]
    except (KeyError, ValueError) as e:
        error(f"Malformed records file: {e}")


def load_records(path: Path) -> list[LadderRecord]:
    return records_from_rows(read_csv(path))


def _progress(verbose: bool, message: str) -> None:
    if verbose:
        warn(message)


def run_ladder(config: ExperimentConfig, verbose: bool = False) -> ExperimentReport:
    """Coupled-error ladder: records, fits and slope acceptance."""
    tasks = [(config, n, rep) for n in config.ladder for rep in range(config.replications)]
    _progress(verbose, f"{len(tasks)} replications over n in {list(config.ladder)}")
    records = [rec for batch in _fan_out(_replicate, tasks, config.jobs) for rec in batch]
    records.sort(key=lambda r: (r.metric, r.n, r.rep))
    report = ExperimentReport(config.kind, records)

    for metric in metrics_of(records):
        for correction in config.corrections:
            if len(errors_by_n(records, metric)) < 3:
                continue
            report.fits.append(fit_rate(records, metric, correction, config.c_n))
        q90 = quantile_by_n(records, metric)
        report.notes.append(f"{metric} 0.9-quantiles: " +
                            ", ".join(f"n={n}: {v:.4g}" for n, v in q90.items()))

    if config.kind == "kmt-empirical":
        report.acceptance.append(kmt_ratio_check(records))
    else:
        primary = config.corrections[0]
        for fit in report.fits:
            if fit.correction != primary:
                continue
            ok = config.slope_low <= fit.slope <= config.slope_high
            report.acceptance.append(AcceptanceCheck(
                f"slope:{fit.metric}", ok,
                f"slope {fit.slope:.4f} (se {fit.stderr:.4f}) vs band "
                f"[{config.slope_low}, {config.slope_high}] with {primary}"))
    if not report.acceptance:
        report.acceptance.append(AcceptanceCheck("ladder", False, "fewer than 3 ladder points"))
    return report


def _bound_task(task) -> dict:
    """Per-replication statistics behind the ladder-based bound checks."""
    config, n, rep = task
    r = Replication(config, n, rep)
    s = r.sample
    G = dist.limit_cdf(s.arrival)
    A = arrivals_path(s, r.horizon)
    return {
        "n": n,
        "arrival-fluid": bounds.arrival_fluid_deviation(A, G, s.p, n),
        "renewal-fluid": bounds.renewal_fluid_deviation(s.V, r.c_n, s.service.mean),
        "timechange": _timechange_error(r),
        "kmt-empirical": _kmt_empirical_error(r),
    }


def _iid_statistics(config: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Partial-sum maxima of the service law and DKW distances of the arrival law."""
    n, reps = config.bound_n, config.bound_replications
    gen = rng.stream(config.seed, n, 0, "aux")
    service = config.service
    draws = dist.sample(service, gen, reps * n).reshape(reps, n)
    maxima = np.array([bounds.partial_sum_max_deviation(row, service.mean) for row in draws])

    G = config.arrival
    arrivals = np.sort(dist.sample(G, gen, reps * n).reshape(reps, n), axis=1)
    g = np.asarray(dist.cdf(G, arrivals), dtype=float)
    k = np.arange(1, n + 1)
    sup = np.maximum((k / n - g).max(axis=1), (g - (k - 1) / n).max(axis=1))
    return maxima, sup


def run_bound_validation(config: ExperimentConfig, verbose: bool = False) -> ExperimentReport:
    report = ExperimentReport(config.kind)

    _progress(verbose, f"{config.bound_replications} iid paths at n={config.bound_n}")
    maxima, dkw = _iid_statistics(config)
    n0 = config.bound_n
    try:
        params = bounds.subexp_params(config.service)
    except UnsupportedFamilyError as e:
        params = None
        report.notes.append(f"subexp: skipped ({e})")
    if params is not None and params.nu > 0:
        report.notes.append(f"subexp: nu = {params.nu:.6g}, m = {params.m:.6g}")
        for t in SUBEXP_T_GRID:
            report.checks.append(bounds.check_bound(
                "subexp-maximal", n0, maxima, t, bounds.subexp_tail_bound(params, n0, t)))
    for eps in DKW_EPS_GRID:
        report.checks.append(bounds.check_bound(
            "classical-dkw", n0, dkw, eps, bounds.classical_dkw_bound(n0, eps)))

    tasks = [(config, n, rep) for n in config.ladder for rep in range(config.replications)]
    _progress(verbose, f"{len(tasks)} coupled replications for ladder bounds")
    rows = _fan_out(_bound_task, tasks, config.jobs)
    by_n = {n: {key: np.sort([r[key] for r in rows if r["n"] == n])
                for key in ("arrival-fluid", "renewal-fluid", "timechange", "kmt-empirical")}
            for n in config.ladder}

    for n, stat in by_n.items():
        for x in KMT_X_GRID:
            report.checks.append(bounds.check_bound(
                "kmt-empirical", n, stat["kmt-empirical"], bounds.dkw_emp_threshold(n, x),
                bounds.dkw_emp_bound(n, x)))

    arrival_fit = bounds.fit_dkw_constants({n: s["arrival-fluid"] for n, s in by_n.items()},
                                           FLUID_EPS_GRID)
    renewal_fit = bounds.fit_dkw_constants({n: s["renewal-fluid"] for n, s in by_n.items()},
                                           FLUID_EPS_GRID, shift=lambda n: 2.0 / n)
    report.notes.append(f"arrival-fluid fitted k1={arrival_fit.k1:g}, k2=k3={arrival_fit.k2:.6g}")
    report.notes.append(f"renewal-fluid fitted k1={renewal_fit.k1:g}, k2=k3={renewal_fit.k2:.6g}")
    for n, stat in by_n.items():
        for eps in FLUID_EPS_GRID:
            report.checks.append(bounds.check_bound(
                "arrival-fluid", n, stat["arrival-fluid"], eps,
                bounds.dkw_style_bound(arrival_fit, n, eps)))
            report.checks.append(bounds.check_bound(
                "renewal-fluid", n, stat["renewal-fluid"], eps + 2.0 / n,
                bounds.dkw_style_bound(renewal_fit, n, eps)))

    G = dist.limit_cdf(config.arrival)
    lip = G.lipschitz if G.lipschitz is not None else 1.0
    base = bounds.TimeChangeBoundParams(c_xi=config.p * lip, L=G.truncation)
    C = bounds.fit_timechange_constant({n: s["timechange"] for n, s in by_n.items()},
                                       TIMECHANGE_X_GRID, base)
    fitted = bounds.TimeChangeBoundParams(c_xi=base.c_xi, L=base.L, C=C)
    zeta = bounds.fit_remainder_rate({n: s["timechange"] for n, s in by_n.items()},
                                     TIMECHANGE_X_GRID, fitted)
    report.notes.append(f"timechange fitted C = {C:.6g}, remainder rate zeta = {zeta:.6g}")
    for n, stat in by_n.items():
        local = bounds.TimeChangeBoundParams(c_xi=base.c_xi, L=base.L,
                                             upsilon2=bounds.arrival_upsilon2(n), C=C, zeta=zeta)
        for x in TIMECHANGE_X_GRID:
            report.checks.append(bounds.check_bound(
                "timechange", n, stat["timechange"], bounds.timechanged_bm_threshold(local, n, x),
                bounds.timechanged_bm_bound(local, n, x)))

    report.acceptance.append(AcceptanceCheck(
        "bound-domination", all(c.passed for c in report.checks),
        f"{sum(c.passed for c in report.checks)}/{len(report.checks)} checks pass"))
    _progress(verbose, f"{H_VARIANCE_REPLICATIONS} replications for Var H_n(1/2)")
    report.acceptance.append(h_variance_check(config))
    return report


def _h_half(task) -> float:
    config, n, rep = task
    return float(build_H(Replication(config, n, rep).sample, np.array([0.0, 0.5])).values[1])


def variance_check(name: str, values, theory: float, label: str = "") -> AcceptanceCheck:
    """Sample variance against theory, within 3 standard errors of a normal sample variance."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return AcceptanceCheck(name, True, "skipped: fewer than 2 replications")
    observed = float(np.var(values, ddof=1))
    tolerance = 3 * theory * math.sqrt(2 / (values.size - 1))
    return AcceptanceCheck(name, abs(observed - theory) <= tolerance,
                           f"{label}variance {observed:.4g}, expected {theory:.4g} +/- {tolerance:.3g}")


def h_variance_check(config: ExperimentConfig, n: int | None = None,
                     replications: int = H_VARIANCE_REPLICATIONS) -> AcceptanceCheck:
    """Sample variance of H_n(1/2) against n[p^2 G(1-G) + p(1-p) G] at the smallest ladder n."""
    n = min(config.ladder) if n is None else n
    tasks = [(config, n, rep) for rep in range(replications)]
    values = _fan_out(_h_half, tasks, config.jobs)
    p = config.p
    g = float(dist.cdf(dist.limit_cdf(config.arrival), 0.5))
    theory = n * (p * p * g * (1 - g) + p * (1 - p) * g)
    return variance_check("h-variance", values, theory, f"n={n}: H_n(1/2) ")


def run_simulation(config: ExperimentConfig, out: Path, n: int | None = None,
                   rep: int = 0) -> ExperimentReport:
    """One coupled sample and its queue; writes sample, trace and approximant CSVs."""
    n = config.ladder[0] if n is None else n
    r = Replication(config, n, rep)
    trace = r.trace
    report = ExperimentReport("simulate-only")
    report.files.append(write_sample_csv(r.sample, out / "sample.csv"))
    report.files.extend(write_trace_csv(trace, out))
    report.files.append(write_summary_csv(r.inputs, trace, out / "queue_summary.csv"))
    report.files.append(write_approximants_csv(r.approximants, out / "approximants.csv"))
    report.files.extend(write_driver_csv(r.sample, out))

    served = truncated_renewal(r.sample.V, r.c_n, np.asarray(trace.D.at(trace.Q.knots)))
    identity = np.array_equal(trace.Q.values, trace.A.at(trace.Q.knots) - served)
    report.acceptance.append(AcceptanceCheck(
        "queue-identity", bool(identity), "Q_n = A_n - M_n(D_n) at every event epoch"))
    report.notes.append(f"n={n}, accepted={trace.accepted}, max Q={trace.max_queue}, "
                        f"emptying time={trace.emptying_time:.6g}, idle={trace.total_idle:.6g}")
    return report


def run_experiment(config: ExperimentConfig, verbose: bool = False) -> ExperimentReport:
    """Run the configured experiment and write its report files to config.out."""
    out = Path(config.out)
    if config.kind == "validate-bounds":
        report = run_bound_validation(config, verbose)
    elif config.kind == "simulate-only":
        report = run_simulation(config, out)
    else:
        report = run_ladder(config, verbose)

    if report.records:
        report.files.append(write_csv(out / "records.csv", RECORD_HEADER,
                                      [r.row() for r in report.records]))
    if report.fits:
        report.files.append(write_csv(out / "fit.csv", FIT_HEADER,
                                      [f.row() for f in sorted(report.fits, key=lambda f: (f.metric, f.correction))]))
    if report.checks:
        report.files.append(write_csv(out / "bounds.csv", bounds.BOUND_HEADER,
                                      [c.row() for c in report.checks]))
    report.files.append(write_text(out / "summary.txt", format_summary(config, report)))
    return report

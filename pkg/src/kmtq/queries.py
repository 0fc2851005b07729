"""Query functions for filtering and aggregating ladder records."""
import numpy as np


def filter_metric(records: list, metric: str) -> list:
    """Return records of one metric."""
    return [r for r in records if r.metric == metric]


def errors_by_n(records: list, metric: str) -> dict[int, np.ndarray]:
    """Sorted errors of one metric, keyed by n.

    Sorting first makes every statistic below independent of the order in
    which workers returned their replications.
    """
    grouped: dict[int, list[float]] = {}
    for r in filter_metric(records, metric):
        grouped.setdefault(r.n, []).append(r.error)
    return {n: np.sort(np.asarray(errs, dtype=float)) for n, errs in sorted(grouped.items())}


def median_by_n(records: list, metric: str) -> dict[int, float]:
    return {n: float(np.median(errs)) for n, errs in errors_by_n(records, metric).items()}


def quantile_by_n(records: list, metric: str, q: float = 0.9) -> dict[int, float]:
    return {n: float(np.quantile(errs, q)) for n, errs in errors_by_n(records, metric).items()}


def metrics_of(records: list) -> list[str]:
    """Distinct metric names, sorted."""
    return sorted({r.metric for r in records})

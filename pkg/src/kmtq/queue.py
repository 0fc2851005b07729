"""Event-driven realization of the RS(G,p)/G/1 queue and its performance paths.

Single server, infinite buffer, FCFS, non-idling, starting empty. The server
processes work at rate c_n, so the k-th job to arrive holds it for V_k / c_n.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kmtq.dist import DistributionSpec
from kmtq.kmt import CoupledSample
from kmtq.paths import GridPath, linear_path, reflect, step_path, write_path_csv
from kmtq.storage import ParameterError, error, write_csv

# Relative slack when comparing cumulative work against c_n * t, so a job
# counts as complete at its own departure epoch despite rounding.
RENEWAL_RTOL = 1e-11

DEPART = 0
ARRIVE = 1


@dataclass(frozen=True)
class QueueInputs:
    n: int
    p: float
    arrival: DistributionSpec
    service: DistributionSpec
    c_n: float

    def __post_init__(self):
        if self.n < 1:
            error(f"Population n must be at least 1, got {self.n}", ParameterError)
        if not 0 < self.p <= 1:
            error(f"Join probability p must lie in (0, 1], got {self.p}", ParameterError)
        if not self.c_n > 0:
            error(f"Server rate c_n must be positive, got {self.c_n}", ParameterError)


@dataclass(frozen=True)
class QueueTrace:
    """Paths of one simulated queue.

    `completions` is t -> M_n(D_n(t)). `event_times` / `unfinished` hold the
    engine's own unfinished-work accounting after each event epoch.
    """

    A: GridPath
    W: GridPath
    Q: GridPath
    D: GridPath
    I: GridPath
    completions: GridPath
    emptying_time: float
    horizon: float
    event_times: np.ndarray
    unfinished: np.ndarray

    @property
    def accepted(self) -> int:
        return int(self.A.values[-1])

    @property
    def max_queue(self) -> int:
        return int(self.Q.values.max())

    @property
    def total_idle(self) -> float:
        """Idle time before the last departure."""
        return float(self.I.at(self.emptying_time))


def _accepted_order(sample: CoupledSample) -> np.ndarray:
    """Indices of joining customers by arrival epoch; ties keep index order."""
    order = np.argsort(sample.T, kind="stable")
    return order[sample.zeta[order] == 1]


def arrivals_path(sample: CoupledSample, horizon: float | None = None) -> GridPath:
    """A_n(t): number of joining customers with T_i <= t."""
    epochs = sample.T[_accepted_order(sample)]
    times, counts = np.unique(epochs, return_counts=True)
    values = np.cumsum(counts).astype(float)
    if times.size == 0 or times[0] > 0:
        times = np.concatenate([[0.0], times])
        values = np.concatenate([[0.0], values])
    return step_path(times, values, horizon)


def workload_path(A: GridPath, V) -> GridPath:
    """W_n(t) = V_1 + ... + V_{A_n(t)}: V's consumed in arrival order."""
    V = np.asarray(V, dtype=float)
    counts = A.values.astype(np.int64)
    if counts.size and counts.max() > V.size:
        error(f"{counts.max()} arrivals but only {V.size} service times", ParameterError)
    cum = np.concatenate([[0.0], np.cumsum(V)])
    return A.with_values(cum[counts])


def truncated_renewal(V, c_n: float, t):
    """M_n(t) = sup{0 <= m <= n : V_1 + ... + V_m <= c_n t}."""
    cum = np.concatenate([[0.0], np.cumsum(np.asarray(V, dtype=float))])
    work = c_n * np.asarray(t, dtype=float)
    m = np.searchsorted(cum, work + RENEWAL_RTOL * np.abs(work), side="right") - 1
    m = np.maximum(m, 0)
    return int(m) if np.ndim(m) == 0 else m


def default_horizon(sample: CoupledSample, c_n: float) -> float:
    """max T_i + S_n / c_n + 1: the queue is empty well before it."""
    return float(sample.T.max() + sample.V.sum() / c_n + 1.0)


def simulate(inputs: QueueInputs, sample: CoupledSample, horizon: float | None = None) -> QueueTrace:
    """Run the FCFS single-server queue on a coupled sample."""
    if sample.n != inputs.n or sample.p != inputs.p:
        error(f"Sample (n={sample.n}, p={sample.p}) does not match queue inputs "
              f"(n={inputs.n}, p={inputs.p})", ParameterError)
    if sample.arrival != inputs.arrival or sample.service != inputs.service:
        error("Sample distributions do not match queue inputs", ParameterError)
    c = inputs.c_n
    end = default_horizon(sample, c) if horizon is None else float(horizon)

    order = _accepted_order(sample)
    V = np.asarray(sample.V, dtype=float)
    events: list[tuple[float, int, int, int]] = []
    for k, i in enumerate(order):
        heapq.heappush(events, (float(sample.T[i]), ARRIVE, k, k))
    seq = len(order)

    waiting: deque[int] = deque()
    q = 0
    done = 0
    busy = False
    busy_since = 0.0
    busy_total = 0.0
    in_service_until = 0.0
    snap_t, snap_q, snap_work = [], [], []
    d_t, d_v = [0.0], [0.0]
    dep_t = []

    def start(job: int, now: float) -> None:
        nonlocal busy, in_service_until, seq
        busy = True
        in_service_until = now + V[job] / c
        heapq.heappush(events, (in_service_until, DEPART, seq, job))
        seq += 1

    while events:
        now, kind, _, job = heapq.heappop(events)
        if kind == ARRIVE:
            q += 1
            if busy:
                waiting.append(job)
            else:
                busy_since = now
                d_t.append(now)
                d_v.append(busy_total)
                start(job, now)
        else:
            q -= 1
            done += 1
            dep_t.append(now)
            if waiting:
                start(waiting.popleft(), now)
            else:
                busy = False
                busy_total += now - busy_since
                d_t.append(now)
                d_v.append(busy_total)
        if not events or events[0][0] != now:
            work = c * (in_service_until - now) if busy else 0.0
            work += float(V[list(waiting)].sum()) if waiting else 0.0
            snap_t.append(now)
            snap_q.append(q)
            snap_work.append(work)

    emptying = dep_t[-1] if dep_t else 0.0
    if end < emptying:
        error(f"Horizon {end} ends before the queue empties at {emptying}", ParameterError)

    A = arrivals_path(sample, end)
    W = workload_path(A, V)
    Q = _step_from_events(snap_t, snap_q, end)
    d_t.append(end)
    d_v.append(busy_total)
    D = linear_path(*_dedupe(d_t, d_v), end)
    I = D.with_values(D.knots - D.values)
    comp_t = np.unique(dep_t)
    comp_v = np.searchsorted(np.asarray(dep_t), comp_t, side="right")
    completions = _step_from_events(comp_t, comp_v, end)
    return QueueTrace(A, W, Q, D, I, completions, float(emptying), end,
                      np.asarray(snap_t, dtype=float), np.asarray(snap_work, dtype=float))


def _step_from_events(times, values, end: float) -> GridPath:
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size == 0 or times[0] > 0:
        times = np.concatenate([[0.0], times])
        values = np.concatenate([[0.0], values])
    return step_path(times, values, end)


def _dedupe(times, values) -> tuple[np.ndarray, np.ndarray]:
    """Keep the last value recorded at each distinct time."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = np.ones(t.size, dtype=bool)
    keep[:-1] = t[1:] != t[:-1]
    return t[keep], v[keep]


def netput_path(trace: QueueTrace, c_n: float) -> GridPath:
    """W_n(t) - c_n t as an exact piecewise-linear path with upward jumps."""
    W = trace.W
    knots = np.unique(np.concatenate([W.knots, [trace.horizon]]))
    drift = c_n * knots
    values = np.asarray(W.at(knots)) - drift
    left = np.asarray(W.left_at(knots)) - drift
    return linear_path(knots, values, trace.horizon, left)


def remaining_workload(trace: QueueTrace, c_n: float) -> GridPath:
    """phi(W_n - c_n id): total unfinished work in the system."""
    return reflect(netput_path(trace, c_n))


def summary_row(inputs: QueueInputs, trace: QueueTrace) -> dict:
    return {
        "n": inputs.n,
        "p": inputs.p,
        "c_n": inputs.c_n,
        "accepted": trace.accepted,
        "max_q": trace.max_queue,
        "emptying_time": trace.emptying_time,
        "total_idle": trace.total_idle,
        "horizon": trace.horizon,
    }


def write_trace_csv(trace: QueueTrace, directory: Path) -> list[Path]:
    """One (t, value, mode) CSV per path."""
    directory = Path(directory)
    named = {"A": trace.A, "W": trace.W, "Q": trace.Q, "D": trace.D, "I": trace.I,
             "M_of_D": trace.completions}
    return [write_path_csv(path, directory / f"trace_{name}.csv") for name, path in named.items()]


def write_summary_csv(inputs: QueueInputs, trace: QueueTrace, file: Path) -> Path:
    row = summary_row(inputs, trace)
    return write_csv(file, list(row), [list(row.values())])

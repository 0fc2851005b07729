"""Sample paths: grid paths, refinable Brownian paths and their functional calculus.

A GridPath is a real path on a finite, strictly increasing knot set. In step
mode it is right-continuous with left limits; in linear mode it interpolates
linearly between knots and may carry explicit left limits at the knots, which
is how piecewise-linear paths with upward jumps (netput, remaining workload)
are stored exactly.

Paths are flat outside their knot range.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kmtq.rng import as_generator
from kmtq.storage import DomainError, ParameterError, ResourceError, error, write_csv

STEP = "step"
LINEAR = "linear"
MODES = (STEP, LINEAR)

# 2**24 + 1 doubles is ~128 MiB; deeper dyadic grids are refused.
MAX_DYADIC_LEVELS = 24


@dataclass(frozen=True)
class GridPath:
    """Immutable path on a finite knot set."""

    knots: np.ndarray
    values: np.ndarray
    mode: str = STEP
    domain_end: float | None = None
    left: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).copy()
        values = np.asarray(self.values, dtype=float).copy()
        if knots.ndim != 1 or knots.size == 0:
            error("GridPath needs at least one knot", ParameterError)
        if values.shape != knots.shape:
            error(f"GridPath has {knots.size} knots but {values.size} values", ParameterError)
        if self.mode not in MODES:
            error(f"Invalid mode: {self.mode}", ParameterError)
        if knots[0] < 0:
            error(f"GridPath knots must be non-negative, got {knots[0]}", ParameterError)
        if np.any(np.diff(knots) <= 0):
            error("GridPath knots must be strictly increasing", ParameterError)
        end = float(knots[-1]) if self.domain_end is None else float(self.domain_end)
        if knots[-1] > end:
            error(f"Knot {knots[-1]} exceeds domain end {end}", ParameterError)

        left = None
        if self.left is not None:
            if self.mode != LINEAR:
                error("Explicit left limits are only stored for linear paths", ParameterError)
            left = np.asarray(self.left, dtype=float).copy()
            if left.shape != knots.shape:
                error("GridPath left limits must match knots", ParameterError)

        for arr in (knots, values, left):
            if arr is not None:
                arr.flags.writeable = False
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "domain_end", end)
        object.__setattr__(self, "left", left)

    def __len__(self) -> int:
        return self.knots.size

    @property
    def start(self) -> float:
        return float(self.knots[0])

    @property
    def left_limits(self) -> np.ndarray:
        """Left limit at every knot (the value itself at the first knot)."""
        if self.mode == STEP:
            return np.concatenate([self.values[:1], self.values[:-1]])
        if self.left is None:
            return self.values
        return self.left

    def at(self, ts):
        """Path value at time(s) ts."""
        t = np.asarray(ts, dtype=float)
        k = self.knots
        idx = np.clip(np.searchsorted(k, t, side="right") - 1, 0, k.size - 1)
        if self.mode == STEP:
            out = self.values[idx]
        else:
            nxt = np.minimum(idx + 1, k.size - 1)
            width = k[nxt] - k[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(width > 0, (t - k[idx]) / width, 0.0)
            frac = np.clip(frac, 0.0, 1.0)
            left = self.left_limits
            out = self.values[idx] + frac * (left[nxt] - self.values[idx])
        return float(out) if out.ndim == 0 else out

    def left_at(self, ts):
        """Left limit of the path at time(s) ts."""
        t = np.asarray(ts, dtype=float)
        k = self.knots
        if self.mode == STEP:
            idx = np.clip(np.searchsorted(k, t, side="left") - 1, 0, k.size - 1)
            out = self.values[idx]
        else:
            flat = np.atleast_1d(t)
            out = np.atleast_1d(np.asarray(self.at(flat), dtype=float)).copy()
            pos = np.minimum(np.searchsorted(k, flat, side="left"), k.size - 1)
            hit = k[pos] == flat
            out[hit] = self.left_limits[pos[hit]]
            out = out.reshape(t.shape)
        return float(out) if out.ndim == 0 else out

    def with_values(self, values, left=None) -> GridPath:
        """Same knots and mode, new values."""
        return GridPath(self.knots, values, self.mode, self.domain_end, left)

    def shifted(self, c: float) -> GridPath:
        """Path plus a constant."""
        left = None if self.left is None else self.left + c
        return self.with_values(self.values + c, left)

    def to_rows(self) -> list[tuple[float, float, str]]:
        return [(float(t), float(v), self.mode) for t, v in zip(self.knots, self.values, strict=True)]


def step_path(knots, values, domain_end: float | None = None) -> GridPath:
    return GridPath(knots, values, STEP, domain_end)


def linear_path(knots, values, domain_end: float | None = None, left=None) -> GridPath:
    return GridPath(knots, values, LINEAR, domain_end, left)


def write_path_csv(path: GridPath, file: Path) -> Path:
    """Debug export with columns (t, value, mode)."""
    return write_csv(file, ["t", "value", "mode"], path.to_rows())


class RefinableBrownianPath:
    """Brownian motion sampled lazily on a growing cache of knots.

    Querying a time between cached knots draws from the Brownian-bridge
    conditional law given the neighbouring cached values; querying past the
    last knot extends the path with an independent Gaussian increment, unless
    the path is pinned (a bridge), in which case it is a domain error.
    Repeated queries return the cached value. Not safe to share between
    workers: call to_grid() to get an immutable snapshot.
    """

    def __init__(self, knots, values, rng, scale: float = 1.0,
                 horizon: float | None = None, pinned: bool = False):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.size == 0 or knots[0] != 0.0 or values[0] != 0.0:
            error("Brownian paths start at B(0) = 0", ParameterError)
        if np.any(np.diff(knots) <= 0):
            error("Brownian path knots must be strictly increasing", ParameterError)
        if scale <= 0:
            error(f"Variance scale must be positive, got {scale}", ParameterError)
        self._knots = knots.copy()
        self._values = values.copy()
        self._rng = as_generator(rng)
        self.scale = float(scale)
        self.horizon = float(knots[-1] if horizon is None else horizon)
        self.pinned = pinned

    @classmethod
    def from_grid(cls, grid: GridPath, rng, scale: float = 1.0, pinned: bool = False):
        """Continue refining an existing path (e.g. a dyadic bridge)."""
        return cls(grid.knots, grid.values, rng, scale, grid.domain_end, pinned)

    @property
    def knots(self) -> np.ndarray:
        view = self._knots.view()
        view.flags.writeable = False
        return view

    @property
    def values(self) -> np.ndarray:
        view = self._values.view()
        view.flags.writeable = False
        return view

    def at(self, ts):
        """Value(s) at ts, refining the cache for unseen times."""
        t = np.asarray(ts, dtype=float)
        flat = t.ravel()
        if flat.size == 0:
            return t.copy()
        if np.any(flat < 0) or not np.all(np.isfinite(flat)):
            error("Brownian path queried at a negative or non-finite time", DomainError)
        if self.pinned and np.any(flat > self.horizon):
            error(f"Pinned path queried beyond its end {self.horizon}", DomainError)
        self._refine(np.unique(flat))
        pos = np.searchsorted(self._knots, flat)
        out = self._values[pos].reshape(t.shape)
        return float(out) if out.ndim == 0 else out

    def _refine(self, ts: np.ndarray) -> None:
        knots, values = self._knots, self._values
        pos = np.minimum(np.searchsorted(knots, ts), knots.size - 1)
        new = ts[knots[pos] != ts]
        if new.size == 0:
            return

        # Group new points by the cached gap they fall in; within a gap they
        # are sampled jointly as a pinned Gaussian walk.
        gap = np.searchsorted(knots, new, side="right")
        first = np.ones(new.size, dtype=bool)
        first[1:] = gap[1:] != gap[:-1]
        prev_t = np.where(first, knots[gap - 1], np.concatenate([[0.0], new[:-1]]))
        z = self._rng.standard_normal(new.size) * np.sqrt(self.scale * (new - prev_t))
        csum = np.cumsum(z)
        starts = np.flatnonzero(first)
        group = np.cumsum(first) - 1
        walk = csum - (csum[starts] - z[starts])[group]

        base = values[gap - 1]
        sampled = base + walk
        interior = gap < knots.size
        last = np.ones(new.size, dtype=bool)
        last[:-1] = gap[:-1] != gap[1:]
        closing = last & interior
        if np.any(closing):
            right_t = knots[gap[closing]]
            z_right = self._rng.standard_normal(int(closing.sum()))
            z_right *= np.sqrt(self.scale * (right_t - new[closing]))
            walk_end = np.zeros(starts.size)
            walk_end[group[closing]] = walk[closing] + z_right
            a_t = knots[gap - 1]
            b_t = knots[np.minimum(gap, knots.size - 1)]
            b_v = values[np.minimum(gap, knots.size - 1)]
            pin = (new - a_t) / np.where(interior, b_t - a_t, 1.0)
            bridge = base + walk + pin * (b_v - base - walk_end[group])
            sampled = np.where(interior, bridge, sampled)

        merged_t = np.concatenate([knots, new])
        order = np.argsort(merged_t, kind="stable")
        self._knots = merged_t[order]
        self._values = np.concatenate([values, sampled])[order]

    def to_grid(self) -> GridPath:
        """Immutable linear snapshot of the cached knots."""
        end = max(self.horizon, float(self._knots[-1]))
        return linear_path(self._knots, self._values, end)


class BrownianBridge:
    """The bridge t -> bm(t) - t * bm(1) on [0, 1], refined through bm."""

    pinned = True
    horizon = 1.0

    def __init__(self, bm: RefinableBrownianPath):
        self.bm = bm

    def at(self, ts):
        t = np.asarray(ts, dtype=float)
        if np.any(t < 0) or np.any(t > 1):
            error("Brownian bridge queried outside [0, 1]", DomainError)
        vals = self.bm.at(np.append(t.ravel(), 1.0))
        out = (vals[:-1] - t.ravel() * vals[-1]).reshape(t.shape)
        return float(out) if out.ndim == 0 else out

    @property
    def knots(self) -> np.ndarray:
        k = self.bm.knots
        return k[k <= 1.0]

    def to_grid(self) -> GridPath:
        k = self.knots
        return linear_path(k, self.at(k), 1.0)


def sample_bm(horizon: float, initial_grid: int, seed, scale: float = 1.0) -> RefinableBrownianPath:
    """Brownian motion with independent Gaussian increments on a uniform grid."""
    if not horizon > 0:
        error(f"Horizon must be positive, got {horizon}", ParameterError)
    if initial_grid < 2:
        error(f"Initial grid needs at least 2 knots, got {initial_grid}", ParameterError)
    rng = as_generator(seed)
    knots = np.linspace(0.0, horizon, initial_grid)
    steps = rng.standard_normal(initial_grid - 1) * np.sqrt(scale * np.diff(knots))
    values = np.concatenate([[0.0], np.cumsum(steps)])
    return RefinableBrownianPath(knots, values, rng, scale, horizon)


def bridge_from_bm(bm: RefinableBrownianPath) -> BrownianBridge:
    """Brownian bridge B(t) - t B(1) built from a Brownian motion on [0, 1]."""
    if bm.horizon != 1.0:
        error(f"Bridge needs a Brownian motion on [0, 1], got horizon {bm.horizon}", ParameterError)
    return BrownianBridge(bm)


def sample_bridge_dyadic(levels: int, seed) -> GridPath:
    """Brownian bridge on the dyadic points k / 2**levels by midpoint refinement.

    Each midpoint is the average of its cell's endpoints plus an independent
    N(0, width / 4) draw, so the cell normals can be recovered exactly.
    """
    if levels < 1:
        error(f"Dyadic depth must be at least 1, got {levels}", ParameterError)
    if levels > MAX_DYADIC_LEVELS:
        error(f"Dyadic depth {levels} exceeds the limit of {MAX_DYADIC_LEVELS}", ResourceError)
    rng = as_generator(seed)
    size = 2 ** levels
    values = np.zeros(size + 1)
    for j in range(levels):
        h = size >> j
        width = 2.0 ** -j
        mid = 0.5 * (values[0:size:h] + values[h::h])
        values[h // 2::h] = mid + np.sqrt(width / 4.0) * rng.standard_normal(2 ** j)
    return linear_path(np.linspace(0.0, 1.0, size + 1), values, 1.0)


def running_infimum(p: GridPath) -> GridPath:
    """inf_{u <= t} p(u) on the same knots; exact at every knot."""
    if p.mode == STEP:
        return p.with_values(np.minimum.accumulate(p.values))
    lows = np.minimum(p.left_limits, p.values)
    inf = np.minimum.accumulate(lows)
    left = p.left_limits.copy()
    left[1:] = np.minimum(inf[:-1], left[1:])
    left[0] = inf[0]
    return p.with_values(inf, left)


def _with_crossings(p: GridPath) -> GridPath:
    """Insert the knots where a linear segment falls through the running infimum."""
    inf = running_infimum(p).values
    ahead = p.values[:-1] - inf[:-1]
    behind = p.left_limits[1:] - inf[:-1]
    cross = np.flatnonzero((ahead > 0) & (behind < 0))
    if cross.size == 0:
        return p
    frac = ahead[cross] / (ahead[cross] - behind[cross])
    t_new = p.knots[cross] + frac * (p.knots[cross + 1] - p.knots[cross])
    keep = (t_new > p.knots[cross]) & (t_new < p.knots[cross + 1])
    cross, t_new = cross[keep], t_new[keep]
    knots = np.concatenate([p.knots, t_new])
    values = np.concatenate([p.values, inf[cross]])
    left = np.concatenate([p.left_limits, inf[cross]])
    order = np.argsort(knots, kind="stable")
    return linear_path(knots[order], values[order], p.domain_end, left[order])


def reflect(p: GridPath) -> GridPath:
    """Reflection map phi(f)(t) = f(t) - inf_{u <= t} f(u); non-negative."""
    if p.mode == LINEAR:
        p = _with_crossings(p)
    inf = running_infimum(p)
    if p.mode == STEP:
        return p.with_values(p.values - inf.values)
    return p.with_values(p.values - inf.values, p.left_limits - inf.left_limits)


def time_change(p, tau: GridPath) -> GridPath:
    """Path t -> p(tau(t)) on tau's knots; p is refined where needed."""
    if np.any(tau.values < 0) or np.any(tau.left_limits < 0):
        error("Time change takes negative values", DomainError)
    values = np.asarray(p.at(tau.values), dtype=float)
    if tau.mode == LINEAR and tau.left is not None:
        return tau.with_values(values, np.asarray(p.at(tau.left), dtype=float))
    return tau.with_values(values)


def sup_distance(p1: GridPath, p2: GridPath, resolution: float) -> float:
    """sup |p1 - p2| over the common domain.

    Evaluated at the union of both knot sets (values and left limits) and a
    grid of spacing `resolution`. Exact when both paths are step paths; for
    paths with a continuous part it is a resolution-limited lower bound.
    """
    if not resolution > 0:
        error(f"Resolution must be positive, got {resolution}", ParameterError)
    lo = max(p1.start, p2.start)
    hi = min(p1.domain_end, p2.domain_end)
    if lo > hi:
        error(f"Path domains [{p1.start}, {p1.domain_end}] and [{p2.start}, {p2.domain_end}] "
              "do not overlap", ParameterError)
    grid = np.append(np.arange(lo, hi, resolution), hi)
    ts = np.concatenate([p1.knots, p2.knots, grid])
    ts = np.unique(ts[(ts >= lo) & (ts <= hi)])
    gap = np.abs(np.asarray(p1.at(ts)) - np.asarray(p2.at(ts)))
    gap_left = np.abs(np.asarray(p1.left_at(ts)) - np.asarray(p2.left_at(ts)))
    return float(max(gap.max(), gap_left.max()))

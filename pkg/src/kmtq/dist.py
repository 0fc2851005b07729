"""Distribution families, empirical cdfs, generalized inverses and cdf distances."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import stats

from kmtq.storage import ParameterError, ValidationError, error, read_csv

FAMILIES = (
    "uniform01", "exponential", "gamma", "bernoulli", "gaussian",
    "deterministic", "table", "mixture",
)

# Mass left beyond the default truncation point of an unbounded support.
DEFAULT_TAIL_MASS = 1e-12

# Grid used for sup-distances between two cdfs that both have continuous parts.
CDF_DISTANCE_GRID = 20001


@dataclass(frozen=True)
class DistributionSpec:
    """A distribution on the real line, described by family and parameters.

    `horizon` is where an unbounded support is truncated (the u = 1 quantile);
    when unset it is the point leaving DEFAULT_TAIL_MASS of mass beyond it.
    """

    family: str
    params: tuple[float, ...] = ()
    table: tuple[tuple[float, float], ...] = ()
    parts: tuple[DistributionSpec, ...] = ()
    horizon: float | None = None
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"Invalid family: {self.family}")
        _validate_params(self)

    @cached_property
    def rv(self):
        """Frozen scipy distribution, or None for families handled directly."""
        p = self.params
        if self.family == "uniform01":
            return stats.uniform(0.0, 1.0)
        if self.family == "exponential":
            return stats.expon(scale=1.0 / p[0])
        if self.family == "gamma":
            return stats.gamma(p[0], scale=p[1])
        if self.family == "bernoulli":
            return stats.bernoulli(p[0])
        if self.family == "gaussian":
            return stats.norm(p[0], p[1])
        return None

    @cached_property
    def mean(self) -> float:
        if self.rv is not None:
            return float(self.rv.mean())
        if self.family == "deterministic":
            return float(self.params[0])
        if self.family == "table":
            return _table_moments(self)[0]
        w = self.mixture_weight
        base, other = self.parts
        return (1 - w) * base.mean + w * other.mean

    @cached_property
    def var(self) -> float:
        if self.rv is not None:
            return float(self.rv.var())
        if self.family == "deterministic":
            return 0.0
        if self.family == "table":
            m1, m2 = _table_moments(self)
            return max(m2 - m1 * m1, 0.0)
        w = self.mixture_weight
        base, other = self.parts
        second = (1 - w) * (base.var + base.mean ** 2) + w * (other.var + other.mean ** 2)
        return max(second - self.mean ** 2, 0.0)

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    @cached_property
    def support(self) -> tuple[float, float]:
        if self.family == "deterministic":
            return (self.params[0], self.params[0])
        if self.family == "table":
            return (self.table[0][0], self.table[-1][0])
        if self.family == "mixture":
            lo = min(s.support[0] for s in self.parts)
            hi = max(s.support[1] for s in self.parts)
            return (lo, hi)
        lo, hi = self.rv.support()
        return (float(lo), float(hi))

    @cached_property
    def lipschitz(self) -> float | None:
        """Lipschitz constant of the cdf, None when it has jumps or is unbounded."""
        p = self.params
        if self.family == "uniform01":
            return 1.0
        if self.family == "exponential":
            return float(p[0])
        if self.family == "gamma":
            shape, scale = p
            if shape < 1:
                return None
            return float(self.rv.pdf((shape - 1) * scale))
        if self.family == "gaussian":
            return 1.0 / (p[1] * math.sqrt(2 * math.pi))
        if self.family == "table":
            t = np.array([row[0] for row in self.table])
            g = np.array([row[1] for row in self.table])
            if g[0] > 0:
                return None
            return float(np.max(np.diff(g) / np.diff(t)))
        if self.family == "mixture":
            consts = [s.lipschitz for s in self.parts]
            if any(c is None for c in consts):
                return None
            w = self.mixture_weight
            return (1 - w) * consts[0] + w * consts[1]
        return None

    @property
    def continuous(self) -> bool:
        return self.lipschitz is not None

    @property
    def mixture_weight(self) -> float:
        """Weight a / sqrt(n) of the perturbing component of a mixture."""
        coefficient, n = self.params
        return coefficient / math.sqrt(n)

    @cached_property
    def truncation(self) -> float:
        """Right end used for an unbounded support."""
        hi = self.support[1]
        if math.isfinite(hi):
            return hi
        if self.horizon is not None:
            return float(self.horizon)
        if self.family == "mixture":
            return max(s.truncation for s in self.parts)
        return float(self.rv.isf(DEFAULT_TAIL_MASS))

    def describe(self) -> str:
        if self.label:
            return self.label
        if self.family == "mixture":
            base, other = self.parts
            return f"mixture({base.describe()},{other.describe()},{self.params[0]:g},{self.params[1]:g})"
        if self.family == "table":
            return f"table({len(self.table)})"
        args = ",".join(f"{v:g}" for v in self.params)
        return f"{self.family}({args})" if args else self.family


def _validate_params(spec: DistributionSpec) -> None:
    p = spec.params
    need = {"uniform01": 0, "exponential": 1, "gamma": 2, "bernoulli": 1, "gaussian": 2,
            "deterministic": 1, "table": 0, "mixture": 2}[spec.family]
    if len(p) != need:
        raise ValidationError(f"{spec.family} takes {need} parameters, got {len(p)}")
    if spec.family == "exponential" and not p[0] > 0:
        raise ValidationError(f"exponential rate must be positive, got {p[0]}")
    if spec.family == "gamma" and not (p[0] > 0 and p[1] > 0):
        raise ValidationError(f"gamma shape and scale must be positive, got {p}")
    if spec.family == "bernoulli" and not 0 <= p[0] <= 1:
        raise ValidationError(f"bernoulli p must be in [0, 1], got {p[0]}")
    if spec.family == "gaussian" and not p[1] > 0:
        raise ValidationError(f"gaussian sd must be positive, got {p[1]}")
    if spec.family == "table":
        if len(spec.table) < 2:
            raise ValidationError("cdf table needs at least 2 rows")
        t = np.array([row[0] for row in spec.table])
        g = np.array([row[1] for row in spec.table])
        if np.any(np.diff(t) <= 0):
            raise ValidationError("cdf table times must be strictly increasing")
        if np.any(np.diff(g) < 0) or g[0] < 0 or g[-1] != 1.0:
            raise ValidationError("cdf table values must be nondecreasing from >= 0 up to 1")
    if spec.family == "mixture":
        if len(spec.parts) != 2:
            raise ValidationError("mixture needs a base and a perturbing distribution")
        coefficient, n = p
        if n < 1 or coefficient < 0 or coefficient / math.sqrt(n) > 1:
            raise ValidationError(f"mixture weight a/sqrt(n) must lie in [0, 1], got a={coefficient}, n={n}")


def _table_moments(spec: DistributionSpec) -> tuple[float, float]:
    t = np.array([row[0] for row in spec.table])
    g = np.array([row[1] for row in spec.table])
    dg = np.diff(g)
    m1 = g[0] * t[0] + float(np.sum(dg * (t[:-1] + t[1:]) / 2))
    m2 = g[0] * t[0] ** 2 + float(np.sum(dg * (t[:-1] ** 2 + t[:-1] * t[1:] + t[1:] ** 2) / 3))
    return m1, m2


def uniform01() -> DistributionSpec:
    return DistributionSpec("uniform01")


def exponential(rate: float) -> DistributionSpec:
    return DistributionSpec("exponential", (float(rate),))


def gamma(shape: float, scale: float) -> DistributionSpec:
    return DistributionSpec("gamma", (float(shape), float(scale)))


def bernoulli(p: float) -> DistributionSpec:
    return DistributionSpec("bernoulli", (float(p),))


def gaussian(mean: float, sd: float) -> DistributionSpec:
    return DistributionSpec("gaussian", (float(mean), float(sd)))


def deterministic(value: float) -> DistributionSpec:
    return DistributionSpec("deterministic", (float(value),))


def table(ts, gs) -> DistributionSpec:
    """Piecewise-linear cdf through the points (t, G(t))."""
    rows = tuple((float(t), float(g)) for t, g in zip(ts, gs, strict=True))
    return DistributionSpec("table", table=rows)


def mixture(base: DistributionSpec, other: DistributionSpec, coefficient: float, n: int) -> DistributionSpec:
    """G^(n) = (1 - a/sqrt(n)) G + (a/sqrt(n)) G~, so that r_n(G) = O(1/sqrt(n))."""
    return DistributionSpec("mixture", (float(coefficient), float(n)), parts=(base, other))


def load_cdf_table(path: Path) -> DistributionSpec:
    """Load a piecewise-linear cdf from CSV rows (t, G(t))."""
    rows = read_csv(path)
    if not rows:
        raise ValidationError(f"Empty cdf table: {path}")
    keys = list(rows[0].keys())
    try:
        ts = [float(r[keys[0]]) for r in rows]
        gs = [float(r[keys[1]]) for r in rows]
    except (ValueError, IndexError) as e:
        raise ValidationError(f"Malformed cdf table {path}: {e}") from e
    return table(ts, gs)


def cdf(spec: DistributionSpec, t):
    """G(t), vectorized."""
    x = np.asarray(t, dtype=float)
    if spec.rv is not None:
        out = spec.rv.cdf(x)
    elif spec.family == "deterministic":
        out = (x >= spec.params[0]).astype(float)
    elif spec.family == "table":
        ts = np.array([row[0] for row in spec.table])
        gs = np.array([row[1] for row in spec.table])
        out = np.where(x < ts[0], 0.0, np.interp(x, ts, gs))
    else:
        w = spec.mixture_weight
        base, other = spec.parts
        out = (1 - w) * cdf(base, x) + w * cdf(other, x)
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def cdf_left(spec: DistributionSpec, t):
    """Left limit G(t-)."""
    x = np.asarray(t, dtype=float)
    if spec.continuous:
        return cdf(spec, x)
    return cdf(spec, np.nextafter(x, -np.inf))


def quantile(spec: DistributionSpec, u):
    """Generalized inverse G^{-1}(u) = sup{x : G(x) <= u}.

    Satisfies G(x) <= u iff x <= G^{-1}(u) on the support. At u = 1 the
    supremum is the right end of the support, truncated at `spec.truncation`
    when the support is unbounded.
    """
    q = np.asarray(u, dtype=float)
    if np.any((q < 0) | (q > 1)) or np.any(np.isnan(q)):
        error("Quantile level must lie in [0, 1]", ParameterError)
    fam = spec.family
    if fam in ("uniform01", "exponential", "gamma", "gaussian"):
        out = spec.rv.ppf(q)
    elif fam == "bernoulli":
        out = np.where(q < 1 - spec.params[0], 0.0, 1.0)
    elif fam == "deterministic":
        out = np.full(q.shape, spec.params[0])
    elif fam == "table":
        out = _table_quantile(spec, q)
    else:
        out = _bisect_quantile(spec, q)
    out = np.where(q >= 1, spec.truncation, np.asarray(out, dtype=float))
    out = np.minimum(out, spec.truncation)
    return float(out) if out.ndim == 0 else out


def _table_quantile(spec: DistributionSpec, q: np.ndarray) -> np.ndarray:
    ts = np.array([row[0] for row in spec.table])
    gs = np.array([row[1] for row in spec.table])
    k = np.searchsorted(gs, q, side="right")
    at_end = k >= ts.size
    before = k == 0
    k = np.clip(k, 1, ts.size - 1)
    g0, g1 = gs[k - 1], gs[k]
    t0, t1 = ts[k - 1], ts[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = t0 + (q - g0) / (g1 - g0) * (t1 - t0)
    x = np.where(before, ts[0], x)
    return np.where(at_end, ts[-1], x)


def _bisect_quantile(spec: DistributionSpec, q: np.ndarray, iterations: int = 200) -> np.ndarray:
    """Vectorized bisection for sup{x : G(x) <= q}, bracketed by the component quantiles."""
    comp = [np.asarray(quantile(s, np.minimum(q, 1.0)), dtype=float) for s in spec.parts]
    lo = np.minimum(comp[0], comp[1])
    hi = np.maximum(comp[0], comp[1])
    lo = np.where(np.isfinite(lo), lo, spec.support[0])
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        below = np.asarray(cdf(spec, mid)) <= q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-15 * np.maximum(1.0, np.abs(hi))):
            break
    return lo


def truncated_mass(spec: DistributionSpec) -> float:
    """Probability mass beyond the truncation point."""
    return float(1.0 - cdf(spec, spec.truncation))


def sample(spec: DistributionSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw by inverse transform."""
    return np.asarray(quantile(spec, rng.random(size)), dtype=float)


@dataclass(frozen=True)
class EmpiricalCdf:
    """Empirical distribution function of a sample; ties stack."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.sort(np.asarray(self.values, dtype=float).ravel())
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.size

    def __call__(self, t):
        out = np.searchsorted(self.values, np.asarray(t, dtype=float), side="right") / self.n
        return float(out) if np.ndim(out) == 0 else out

    def left(self, t):
        out = np.searchsorted(self.values, np.asarray(t, dtype=float), side="left") / self.n
        return float(out) if np.ndim(out) == 0 else out

    def jumps(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct jump points and their masses."""
        points, counts = np.unique(self.values, return_counts=True)
        return points, counts / self.n


def empirical_cdf(samples) -> EmpiricalCdf:
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        error("Empirical cdf needs at least one sample", ParameterError)
    return EmpiricalCdf(samples)


def _eval(obj, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(obj, EmpiricalCdf):
        return np.asarray(obj(xs)), np.asarray(obj.left(xs))
    return np.asarray(cdf(obj, xs)), np.asarray(cdf_left(obj, xs))


def _candidates(obj) -> np.ndarray:
    if isinstance(obj, EmpiricalCdf):
        return obj.jumps()[0]
    if obj.family == "bernoulli":
        return np.array([0.0, 1.0])
    if obj.family == "deterministic":
        return np.array(obj.params)
    if obj.family == "table":
        return np.array([row[0] for row in obj.table])
    if obj.family == "mixture":
        return np.concatenate([_candidates(s) for s in obj.parts])
    return np.empty(0)


def _continuous_span(obj) -> tuple[float, float] | None:
    if isinstance(obj, EmpiricalCdf):
        return None
    if obj.family in ("bernoulli", "deterministic"):
        return None
    lo = float(quantile(obj, 1e-9)) if not math.isfinite(obj.support[0]) else obj.support[0]
    return (lo, obj.truncation)


def sup_cdf_distance(a, b) -> float:
    """sup_t |a(t) - b(t)| for empirical cdfs and/or distribution specs.

    Exact when at most one side has a continuous part (the sup of a step
    function against a continuous one is attained at a jump or its left
    limit); between two continuous cdfs it is evaluated on a fine grid.
    """
    pts = [_candidates(a), _candidates(b)]
    spans = [s for s in (_continuous_span(a), _continuous_span(b)) if s is not None]
    if len(spans) == 2:
        lo = min(s[0] for s in spans)
        hi = max(s[1] for s in spans)
        pts.append(np.linspace(lo, hi, CDF_DISTANCE_GRID))
    xs = np.unique(np.concatenate(pts))
    if xs.size == 0:
        return 0.0
    va, la = _eval(a, xs)
    vb, lb = _eval(b, xs)
    return float(max(np.max(np.abs(va - vb)), np.max(np.abs(la - lb))))


def r_n(spec: DistributionSpec) -> float:
    """sup |G^(n) - G| for a mixture spec; zero for any other family."""
    if spec.family != "mixture":
        return 0.0
    return sup_cdf_distance(spec, spec.parts[0])


def limit_cdf(spec: DistributionSpec) -> DistributionSpec:
    """The limiting G of a G^(n) family (the distribution itself otherwise)."""
    return spec.parts[0] if spec.family == "mixture" else spec

"""Tail-bound evaluators and their Monte Carlo validation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, stats
from scipy.special import gammainc, gammaincc, ndtr

from kmtq import dist
from kmtq.dist import DistributionSpec
from kmtq.paths import GridPath
from kmtq.storage import ParameterError, UnsupportedFamilyError, error

# Lambda is located to this relative tolerance.
LAMBDA_RTOL = 1e-9

# Constants of the empirical-process coupling bound.
KMT_C = 100.0
KMT_K = 10.0
KMT_LAMBDA = 1 / 50

BOUND_HEADER = ["bound", "n", "threshold", "bound_value", "empirical", "ci_low", "ci_high", "pass"]


@dataclass(frozen=True)
class SubExpParams:
    """Sub-exponential parameters (nu, m) of a law with mean and variance."""

    nu: float
    m: float
    mean: float
    var: float

    @property
    def boundary(self) -> float:
        """t where the Gaussian regime hands over to the exponential one."""
        return self.nu ** 2 / self.m if self.m > 0 else math.inf


@dataclass(frozen=True)
class TimeChangeBoundParams:
    """Constants of the DKW-type inequality and the time-changed BM bound."""

    k0: float = 1.0
    k1: float = 2.0
    k2: float = 2.0
    k3: float = 2.0
    gamma: float = 1.0
    c_xi: float = 1.0
    L: float = 1.0
    upsilon2: float = 1.0
    C: float = 1.0
    # Rate of the additive exp(-n zeta) remainder; inf drops the term.
    zeta: float = math.inf

    def __post_init__(self):
        if not 0 < self.gamma < 4:
            error(f"gamma must lie in (0, 4), got {self.gamma}", ParameterError)
        if min(self.k0, self.k1, self.k2, self.k3) <= 0:
            error("DKW constants k0..k3 must be positive", ParameterError)
        if not self.upsilon2 > 0:
            error(f"upsilon^2 must be positive, got {self.upsilon2}", ParameterError)
        if not self.zeta > 0:
            error(f"zeta must be positive, got {self.zeta}", ParameterError)


def _abs_mgf(spec: DistributionSpec, s: float, center: float) -> float:
    """E[exp(s |X - center|)] for s >= 0."""
    fam, p = spec.family, spec.params
    if fam == "gaussian":
        a, sd = p[0] - center, p[1]
        return (math.exp(s * a + s * s * sd * sd / 2) * ndtr(a / sd + s * sd)
                + math.exp(-s * a + s * s * sd * sd / 2) * ndtr(-a / sd + s * sd))
    if fam == "bernoulli":
        return (1 - p[0]) * math.exp(s * abs(center)) + p[0] * math.exp(s * abs(1 - center))
    if fam == "deterministic":
        return math.exp(s * abs(p[0] - center))
    if fam in ("gamma", "exponential"):
        shape, scale = (1.0, 1.0 / p[0]) if fam == "exponential" else p
        if s * scale >= 1:
            return math.inf
        c = max(center, 0.0)
        upper = math.exp(-s * c) * (1 - s * scale) ** -shape * gammaincc(shape, c * (1 / scale - s))
        lower = math.exp(s * c) * (1 + s * scale) ** -shape * gammainc(shape, c * (1 / scale + s))
        # Left of the support, |X - center| = X + |center|.
        return float(upper + lower) * math.exp(s * max(-center, 0.0))
    if fam == "mixture":
        w = spec.mixture_weight
        base, other = spec.parts
        return (1 - w) * _abs_mgf(base, s, center) + w * _abs_mgf(other, s, center)
    return _abs_mgf_quad(spec, s, center)


def _abs_mgf_quad(spec: DistributionSpec, s: float, center: float) -> float:
    """Adaptive quadrature over the density (uniform01 and cdf tables)."""
    if spec.family == "uniform01":
        pieces = [(0.0, 1.0, 1.0)]
        atom = 0.0
    else:
        ts = [row[0] for row in spec.table]
        gs = [row[1] for row in spec.table]
        pieces = [(ts[k], ts[k + 1], (gs[k + 1] - gs[k]) / (ts[k + 1] - ts[k]))
                  for k in range(len(ts) - 1)]
        atom = gs[0] * math.exp(s * abs(ts[0] - center))
    total = atom
    for lo, hi, density in pieces:
        if density == 0:
            continue
        inner = [center] if lo < center < hi else None
        value, _ = integrate.quad(lambda x: math.exp(s * abs(x - center)), lo, hi, points=inner)
        total += density * value
    return total


def _lambda_cap(spec: DistributionSpec) -> float:
    """Largest lambda at which the two-sided MGF can be finite."""
    if spec.family == "gamma":
        return 0.5 / spec.params[1]
    if spec.family == "exponential":
        return 0.5 * spec.params[0]
    if spec.family == "mixture":
        return min(_lambda_cap(s) for s in spec.parts)
    return math.inf


def subexp_params(spec: DistributionSpec) -> SubExpParams:
    """nu = sqrt(2 Var X); m = 1/lambda* where E[exp(2 lambda* |X - mu|)] = 4."""
    mean, var = spec.mean, spec.var
    nu = math.sqrt(2 * var)
    if var == 0:
        return SubExpParams(0.0, 0.0, mean, 0.0)

    def excess(lam: float) -> float:
        return _abs_mgf(spec, 2 * lam, mean) - 4.0

    cap = _lambda_cap(spec)
    hi = min(1.0 / math.sqrt(var), cap * (1 - 1e-9))
    while excess(hi) < 0:
        if math.isfinite(cap) and hi >= cap * (1 - 1e-9):
            raise UnsupportedFamilyError(f"MGF of {spec.describe()} stays below 4 up to its radius")
        hi = min(2 * hi, cap * (1 - 1e-9))
        if hi > 1e12:
            raise UnsupportedFamilyError(f"No finite sub-exponential rate for {spec.describe()}")
    lam = optimize.brentq(excess, 0.0, hi, rtol=LAMBDA_RTOL, xtol=1e-300)
    return SubExpParams(nu, 1.0 / lam, mean, var)


def subexp_tail_bound(params: SubExpParams, n: int, t):
    """2 exp(-n t^2 / (2 nu^2)) up to t = nu^2/m, then 2 exp(-n t / (2 m)).

    Bounds both P(|S_n/n - mu| >= t) and P(max_k |S_k - k mu| >= n t).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        error("Tail bounds take t >= 0", ParameterError)
    if params.nu == 0:
        out = np.where(t > 0, 0.0, 2.0)
    else:
        with np.errstate(divide="ignore", over="ignore"):
            gauss = 2 * np.exp(-n * t ** 2 / (2 * params.nu ** 2))
            expo = 2 * np.exp(-n * t / (2 * params.m))
        out = np.where(t <= params.boundary, gauss, expo)
    return float(out) if out.ndim == 0 else out


def dkw_emp_threshold(n: int, x: float, C: float = KMT_C) -> float:
    """C log n + x, the deviation scale of the empirical-process coupling."""
    return C * math.log(n) + x


def dkw_emp_bound(n: int, x, K: float = KMT_K, lam: float = KMT_LAMBDA):
    """K exp(-lambda x): tail of sqrt(n) sup |alpha_n - B^br| beyond C log n + x."""
    out = K * np.exp(-lam * np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def classical_dkw_bound(n: int, eps):
    """2 exp(-2 n eps^2) for sup |G_n - G|."""
    out = 2 * np.exp(-2 * n * np.asarray(eps, dtype=float) ** 2)
    return float(out) if np.ndim(out) == 0 else out


def dkw_style_bound(params: TimeChangeBoundParams, n: int, eps):
    """k1 exp(-min(k2 n^gamma eps^2, k3 n^gamma eps))."""
    eps = np.asarray(eps, dtype=float)
    scale = n ** params.gamma
    out = params.k1 * np.exp(-np.minimum(params.k2 * scale * eps ** 2, params.k3 * scale * eps))
    return float(out) if out.ndim == 0 else out


def arrival_upsilon2(n: int) -> float:
    """Variance bound 1/(2 sqrt(n)) of the arrival time change."""
    return 1.0 / (2 * math.sqrt(n))


def timechanged_bm_threshold(params: TimeChangeBoundParams, n: int, x: float) -> float:
    """C sqrt(log((c_xi L) v n)) / n^(1/4) + x."""
    return params.C * math.sqrt(math.log(max(params.c_xi * params.L, n))) / n ** 0.25 + x


def timechanged_bm_bound(params: TimeChangeBoundParams, n: int, x):
    """2 exp(-x^2 / (2 upsilon^2)) + exp(-n zeta): tail of sup |B_Xi - B_xi| beyond the threshold."""
    out = 2 * np.exp(-np.asarray(x, dtype=float) ** 2 / (2 * params.upsilon2)) + math.exp(-n * params.zeta)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Exceedance:
    estimate: float
    ci_low: float
    ci_high: float
    hits: int
    trials: int

    @property
    def stderr(self) -> float:
        p = self.estimate
        return math.sqrt(p * (1 - p) / self.trials)


def empirical_exceedance(samples, threshold: float) -> Exceedance:
    """Fraction of samples above threshold with a 95% binomial interval.

    No hits gives the rule-of-three interval [0, 3/N]; otherwise Wilson.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        error("Exceedance needs at least one sample", ParameterError)
    hits = int(np.sum(x > threshold))
    trials = x.size
    if hits == 0:
        return Exceedance(0.0, 0.0, min(1.0, 3.0 / trials), 0, trials)
    ci = stats.binomtest(hits, trials).proportion_ci(confidence_level=0.95, method="wilson")
    return Exceedance(hits / trials, float(ci.low), float(ci.high), hits, trials)


@dataclass(frozen=True)
class BoundCheck:
    name: str
    n: int
    threshold: float
    bound: float
    exceedance: Exceedance

    @property
    def passed(self) -> bool:
        """Empirical tail within 3 standard errors of the bound (vacuous bounds pass)."""
        if self.bound >= 1:
            return True
        return self.exceedance.estimate <= self.bound + 3 * self.exceedance.stderr

    def row(self) -> list:
        e = self.exceedance
        return [self.name, self.n, self.threshold, self.bound, e.estimate, e.ci_low, e.ci_high,
                self.passed]


def check_bound(name: str, n: int, samples, threshold: float, bound: float) -> BoundCheck:
    return BoundCheck(name, n, float(threshold), float(bound), empirical_exceedance(samples, threshold))


def partial_sum_max_deviation(x, mean: float) -> float:
    """max_k |S_k - k mean| / n over a sample path of increments."""
    x = np.asarray(x, dtype=float)
    dev = np.cumsum(x - mean)
    return float(np.abs(dev).max() / x.size)


def arrival_fluid_deviation(A: GridPath, G: DistributionSpec, p: float, n: int) -> float:
    """sup_t |A_n(t)/n - pG(t)|, checked on both sides of every jump."""
    g = np.asarray(dist.cdf(G, A.knots), dtype=float)
    right = np.abs(A.values / n - p * g)
    left = np.abs(A.left_limits / n - p * np.asarray(dist.cdf_left(G, A.knots)))
    tail = abs(A.values[-1] / n - p * dist.cdf(G, max(A.domain_end, G.truncation)))
    return float(max(right.max(), left.max(), tail))


def renewal_fluid_deviation(V, c_n: float, mu: float) -> float:
    """sup_t |M_n(t)/n - (c_n t/(n mu) ^ 1)|; M_n jumps at S_k / c_n."""
    V = np.asarray(V, dtype=float)
    n = V.size
    jumps = np.cumsum(V) / c_n
    fluid = np.minimum(c_n * jumps / (n * mu), 1.0)
    k = np.arange(1, n + 1)
    after = np.abs(k / n - fluid)
    before = np.abs((k - 1) / n - fluid)
    return float(max(after.max(), before.max()))


def fit_dkw_constants(samples_by_n: dict[int, np.ndarray], eps_grid, gamma: float = 1.0,
                      shift=None) -> TimeChangeBoundParams:
    """Smallest k2 (with k1 = 2, k3 = k2) whose bound dominates every sampled tail.

    `shift(n)` moves the threshold to eps + shift(n), as for the renewal
    statistic's 2/n offset.
    """
    k2 = math.inf
    for n, samples in sorted(samples_by_n.items()):
        for eps in eps_grid:
            threshold = eps + (shift(n) if shift else 0.0)
            e = empirical_exceedance(samples, threshold)
            if e.ci_high >= 2:
                continue
            k2 = min(k2, math.log(2.0 / e.ci_high) / (n ** gamma * eps ** 2))
    if not math.isfinite(k2):
        k2 = 1.0
    return TimeChangeBoundParams(k1=2.0, k2=k2, k3=k2, gamma=gamma)


def fit_timechange_constant(samples_by_n: dict[int, np.ndarray], x_grid,
                            params: TimeChangeBoundParams) -> float:
    """Smallest C such that every sampled tail sits below 2 exp(-x^2 / (2 upsilon_n^2)).

    upsilon_n^2 is taken as the arrival-case value 1/(2 sqrt(n)).
    """
    C = 0.0
    for n, samples in sorted(samples_by_n.items()):
        local = TimeChangeBoundParams(c_xi=params.c_xi, L=params.L, upsilon2=arrival_upsilon2(n))
        scale = n ** 0.25 / math.sqrt(math.log(max(params.c_xi * params.L, n)))
        for x in x_grid:
            bound = timechanged_bm_bound(local, n, x)
            if bound >= 1:
                continue
            needed = float(np.quantile(samples, 1 - bound))
            C = max(C, (needed - x) * scale)
    return C


def fit_remainder_rate(samples_by_n: dict[int, np.ndarray], x_grid,
                       params: TimeChangeBoundParams) -> float:
    """Largest zeta whose exp(-n zeta) term covers every sampled excess over the Gaussian part.

    Probes use the fitted C in `params` and the arrival-case upsilon_n^2.
    Returns inf when no sampled tail exceeds the Gaussian part alone.
    """
    zeta = math.inf
    for n, samples in sorted(samples_by_n.items()):
        local = TimeChangeBoundParams(c_xi=params.c_xi, L=params.L, C=params.C,
                                      upsilon2=arrival_upsilon2(n))
        for x in x_grid:
            gaussian = timechanged_bm_bound(local, n, x)
            if gaussian >= 1:
                continue
            excess = empirical_exceedance(samples, timechanged_bm_threshold(local, n, x)).estimate - gaussian
            if 0 < excess < 1:
                zeta = min(zeta, -math.log(excess) / n)
    return zeta

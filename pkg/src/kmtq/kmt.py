"""Strong-embedding constructions driven by Brownian objects.

Three pieces, each a dyadic conditional quantile transform:

- uniforms_from_bridge: iid uniforms whose empirical process hugs a Brownian
  bridge. Cell counts are split by Bin(N, 1/2) quantiles of the bridge's
  standardized midpoint normals.
- walk_from_bm: iid increments whose partial sums hug a Brownian motion.
  Block sums are split by the conditional law of a half-block sum given the
  block sum.
- build_coupled_sample: arrival epochs, dropout indicators and service times
  of one replication, each built from its own driver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import ndtr

from kmtq import dist
from kmtq.dist import DistributionSpec
from kmtq.paths import BrownianBridge, GridPath, RefinableBrownianPath, sample_bm, write_path_csv
from kmtq.rng import as_generator, streams
from kmtq.storage import ParameterError, UnsupportedFamilyError, error, write_csv

# Depth at which the bridge recursion stops splitting cells.
J_MAX = 40

WALK_FAMILIES = ("gaussian", "bernoulli", "gamma", "exponential", "deterministic")
SERVICE_FAMILIES = ("gamma", "exponential", "deterministic")

BRANCH_FIXED = "fixed"
BRANCH_PERTURBED = "perturbed"


def binom_half_quantile(m, u):
    """H_m(u): smallest k with P(Bin(m, 1/2) <= k) >= u; H_0 = 0."""
    m_arr = np.asarray(m, dtype=np.int64)
    u_arr = np.asarray(u, dtype=float)
    if np.any(m_arr < 0):
        error("Binomial size must be non-negative", ParameterError)
    safe_m = np.maximum(m_arr, 1)
    k = stats.binom.ppf(u_arr, safe_m, 0.5)
    k = np.clip(np.nan_to_num(k, nan=0.0), 0, safe_m)
    out = np.where(m_arr == 0, 0, k).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DyadicCounts:
    """Cell counts of the bridge recursion, level by level.

    Level j lists the cells alive at that depth (index k of [k/2^j, (k+1)/2^j])
    with their counts; `split[j]` marks the cells that were split further.
    """

    n: int
    index: list[np.ndarray]
    count: list[np.ndarray]
    split: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.count) - 1

    def level_total(self, j: int) -> int:
        """Points at depth j plus points parked in cells that stopped earlier."""
        parked = sum(int(self.count[i][~self.split[i]].sum()) for i in range(j))
        return int(self.count[j].sum()) + parked

    def conserved(self) -> bool:
        for j in range(self.depth):
            children = self.count[j + 1]
            if not np.array_equal(children[0::2] + children[1::2], self.count[j][self.split[j]]):
                return False
        return all(self.level_total(j) == self.n for j in range(self.depth + 1))


@dataclass(frozen=True)
class BridgeUniforms:
    """Output of uniforms_from_bridge."""

    order_stats: np.ndarray
    permutation: np.ndarray
    counts: DyadicCounts
    diagnostics: list[str] = field(default_factory=list)

    @property
    def uniforms(self) -> np.ndarray:
        return self.order_stats[self.permutation]


def _as_refinable(bridge, rng):
    if isinstance(bridge, GridPath):
        return RefinableBrownianPath.from_grid(bridge, rng, pinned=True)
    return bridge


def dyadic_normals(bridge, level: int, cells: np.ndarray) -> np.ndarray:
    """Standardized midpoint normals Z_i of the given cells at one level."""
    size = 2.0 ** (level + 1)
    left = bridge.at(2 * cells / size)
    mid = bridge.at((2 * cells + 1) / size)
    right = bridge.at((2 * cells + 2) / size)
    return 2.0 ** (level / 2) * (2 * np.asarray(mid) - np.asarray(left) - np.asarray(right))


def uniforms_from_bridge(n: int, bridge, aux_seed, permutation_seed=None,
                         j_max: int = J_MAX) -> BridgeUniforms:
    """n iid U(0,1) order statistics built from a Brownian bridge, then permuted.

    `bridge` is a BrownianBridge view or a dyadic bridge GridPath (refined
    further as needed with `aux_seed` randomness). Cells holding at most one
    point, and cells still crowded at depth j_max, place their points
    uniformly within the cell.
    """
    if n < 1:
        error(f"Need at least one uniform, got n={n}", ParameterError)
    aux = as_generator(aux_seed)
    perm_rng = aux if permutation_seed is None else as_generator(permutation_seed)
    bridge = _as_refinable(bridge, aux)

    index = [np.array([0], dtype=np.int64)]
    count = [np.array([n], dtype=np.int64)]
    split: list[np.ndarray] = []
    diagnostics: list[str] = []
    placed: list[np.ndarray] = []

    j = 0
    while True:
        cells, counts = index[j], count[j]
        busy = counts > 1
        if j >= j_max and np.any(busy):
            diagnostics.append(
                f"depth {j_max} reached with {int(busy.sum())} cells holding more than one point; "
                "placing them uniformly within their cells")
            busy = np.zeros_like(busy)
        split.append(busy)
        width = 2.0 ** -j
        lone = ~busy & (counts > 0)
        if np.any(lone):
            reps = counts[lone]
            starts = np.repeat(cells[lone] * width, reps)
            placed.append(starts + width * aux.random(int(reps.sum())))
        if not np.any(busy):
            break
        parents, totals = cells[busy], counts[busy]
        z = dyadic_normals(bridge, j, parents)
        lower = binom_half_quantile(totals, ndtr(z))
        index.append(np.stack([2 * parents, 2 * parents + 1], axis=1).ravel())
        count.append(np.stack([lower, totals - lower], axis=1).ravel())
        j += 1

    order_stats = np.sort(np.concatenate(placed))
    permutation = perm_rng.permutation(n)
    return BridgeUniforms(order_stats, permutation, DyadicCounts(n, index, count, split), diagnostics)


def _check_walk_family(family: DistributionSpec) -> None:
    if family.family not in WALK_FAMILIES:
        raise UnsupportedFamilyError(
            f"No tractable dyadic conditional law for family {family.family}")


def _top_sum(family: DistributionSpec, size: int, z: float) -> float:
    """Quantile transform of Phi(z) under the size-fold convolution law."""
    fam, p = family.family, family.params
    if fam == "bernoulli":
        if p[0] in (0.0, 1.0):
            return size * p[0]
        return float(np.clip(stats.binom.ppf(ndtr(z), size, p[0]), 0, size))
    if fam == "deterministic":
        return size * p[0]
    shape, scale = (1.0, 1.0 / p[0]) if fam == "exponential" else p
    law = stats.gamma(size * shape, scale=scale)
    return float(law.isf(ndtr(-z)) if z > 0 else law.ppf(ndtr(z)))


def _split(family: DistributionSpec, block: int, sums: np.ndarray, z: np.ndarray) -> np.ndarray:
    """First-half sums given block sums, driven by standard normals z."""
    fam, p = family.family, family.params
    half = block // 2
    if fam == "bernoulli":
        s = np.rint(sums).astype(np.int64)
        lo = np.maximum(0, s - half)
        hi = np.minimum(s, half)
        first = stats.hypergeom.ppf(ndtr(z), block, s, half)
        return np.clip(np.nan_to_num(first, nan=0.0), lo, hi).astype(float)
    if fam == "deterministic":
        return np.full(sums.shape, half * p[0])
    shape = 1.0 if fam == "exponential" else p[0]
    law = stats.beta(half * shape, half * shape)
    frac = np.where(z > 0, law.isf(ndtr(-z)), law.ppf(ndtr(z)))
    return sums * frac


def walk_from_bm(n: int, bm, family: DistributionSpec, unit: float = 1.0) -> np.ndarray:
    """n iid increments of `family` coupled to bm through the dyadic scheme.

    The walk sees bm in units of `unit`: W(k) = bm(k * unit) / sqrt(unit).
    Non-powers of two are built at the next power of two and truncated.
    Gaussian increments are exactly mean + sd * (W(k) - W(k-1)).
    """
    if n < 1:
        error(f"Walk length must be at least 1, got {n}", ParameterError)
    if not unit > 0:
        error(f"Walk time unit must be positive, got {unit}", ParameterError)
    _check_walk_family(family)
    levels = max(0, math.ceil(math.log2(n)))
    size = 2 ** levels
    w = np.asarray(bm.at(np.arange(size + 1) * unit), dtype=float) / math.sqrt(unit)

    if family.family == "gaussian":
        mean, sd = family.params
        return (mean + sd * np.diff(w))[:n]

    sums = np.array([_top_sum(family, size, w[-1] / math.sqrt(size))])
    for j in range(levels):
        block = size >> j
        left = w[0:size:block]
        mid = w[block // 2::block]
        right = w[block::block]
        z = ((mid - left) - (right - mid)) / math.sqrt(block)
        first = _split(family, block, sums, z)
        sums = np.stack([first, sums - first], axis=1).ravel()
    return sums[:n]


@dataclass(frozen=True)
class CoupledSample:
    """One replication's customers and the Brownian drivers they were built from.

    V is indexed in arrival order: the k-th accepted customer brings V[k-1].
    The drivers stay refinable, so approximants built later read the same
    paths.
    """

    n: int
    p: float
    arrival: DistributionSpec
    service: DistributionSpec
    T: np.ndarray
    zeta: np.ndarray
    V: np.ndarray
    bridge: BrownianBridge
    dropout_bm: RefinableBrownianPath
    service_bm: RefinableBrownianPath
    uniforms: BridgeUniforms
    branch: str = BRANCH_FIXED

    @property
    def accepted(self) -> int:
        return int(self.zeta.sum())

    @property
    def diagnostics(self) -> list[str]:
        return self.uniforms.diagnostics


def build_coupled_sample(n: int, p: float, arrival: DistributionSpec,
                         service: DistributionSpec, master_seed: int, rep: int = 0) -> CoupledSample:
    """Arrival epochs, dropouts and service times on one probability space.

    T_i = G^{-1}(U_i) with U from the bridge scheme. The dropout walk over
    B-hat is read in arrival-rank order, so the i-th earliest customer joins
    with the i-th walk increment. Service times come from the walk over B.
    """
    if n < 1:
        error(f"Population n must be at least 1, got {n}", ParameterError)
    if not 0 < p <= 1:
        error(f"Join probability p must lie in (0, 1], got {p}", ParameterError)
    if service.family not in SERVICE_FAMILIES:
        raise UnsupportedFamilyError(f"Unsupported service family: {service.family}")

    rngs = streams(master_seed, n, rep)
    bridge = BrownianBridge(sample_bm(1.0, 2, rngs["bridge"]))
    dropout_bm = sample_bm(1.0, 2, rngs["dropout"])
    service_bm = sample_bm(1.0, 2, rngs["service"])

    unif = uniforms_from_bridge(n, bridge, rngs["placement"], rngs["permutation"])
    T = np.asarray(dist.quantile(arrival, unif.uniforms), dtype=float).reshape(n)
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(T, kind="stable")] = np.arange(n)
    walk = walk_from_bm(n, dropout_bm, dist.bernoulli(p), unit=1.0 / n)
    zeta = np.rint(walk[ranks]).astype(np.int64)
    V = walk_from_bm(n, service_bm, service, unit=1.0 / n)

    branch = BRANCH_PERTURBED if arrival.family == "mixture" else BRANCH_FIXED
    for arr in (T, zeta, V):
        arr.flags.writeable = False
    return CoupledSample(n, p, arrival, service, T, zeta, V, bridge, dropout_bm, service_bm,
                         unif, branch)


def empirical_coupling_error(uniforms: BridgeUniforms, bridge, resolution: float = 1 / 4096) -> float:
    """sqrt(n) * sup_t |alpha_n(t) - B(t)|, alpha_n the uniform empirical process.

    Checked at every order statistic (both sides of the jump) and on a grid
    of the given spacing.
    """
    u = uniforms.order_stats
    n = u.size
    ts = np.unique(np.concatenate([u, np.arange(0.0, 1.0, resolution), [1.0]]))
    b = np.asarray(bridge.at(ts), dtype=float)
    right = np.searchsorted(u, ts, side="right") / n
    left = np.searchsorted(u, ts, side="left") / n
    gap = np.maximum(np.abs(math.sqrt(n) * (right - ts) - b), np.abs(math.sqrt(n) * (left - ts) - b))
    return float(math.sqrt(n) * gap.max())


def write_sample_csv(sample: CoupledSample, file: Path) -> Path:
    """Columns (i, T_i, zeta_i, V_i)."""
    rows = [(i + 1, float(t), int(z), float(v))
            for i, (t, z, v) in enumerate(zip(sample.T, sample.zeta, sample.V, strict=True))]
    return write_csv(file, ["i", "T_i", "zeta_i", "V_i"], rows)


def write_driver_csv(sample: CoupledSample, out: Path) -> list[Path]:
    """Cached knots of each driving path as driver_<name>.csv."""
    drivers = {"bridge": sample.bridge, "dropout": sample.dropout_bm, "service": sample.service_bm}
    return [write_path_csv(path.to_grid(), Path(out) / f"driver_{name}.csv")
            for name, path in drivers.items() if path is not None]

"""Tests for grid paths, refinable Brownian paths and the reflection map."""
import numpy as np
import pytest

from kmtq.paths import (
    BrownianBridge,
    GridPath,
    bridge_from_bm,
    linear_path,
    reflect,
    running_infimum,
    sample_bm,
    sample_bridge_dyadic,
    step_path,
    sup_distance,
    time_change,
    write_path_csv,
)
from kmtq.storage import DomainError, ParameterError, ResourceError, read_csv


def brute_force_reflection(values: np.ndarray, prefix: np.ndarray) -> np.ndarray:
    """values[k] - min(values[:k+1]), with prefix the lower-triangular mask."""
    return values - np.where(prefix, values[None, :], np.inf).min(axis=1)


class TestGridPath:
    def test_step_evaluation(self):
        """Step paths are right-continuous and flat past the last knot."""
        p = step_path([0.0, 1.0, 2.0], [0.0, 1.0, 3.0])

        assert p.at(1.5) == 1.0
        assert p.at(2.0) == 3.0
        assert p.at(5.0) == 3.0
        assert p.left_at(1.0) == 0.0

    def test_linear_with_left_limits(self):
        """A linear path with an upward jump keeps both sides of the jump."""
        p = linear_path([0.0, 1.0, 4.0], [0.0, 1.0, -2.0], left=[0.0, -1.0, -2.0])

        assert p.at(0.5) == pytest.approx(-0.5)
        assert p.at(1.0) == 1.0
        assert p.left_at(1.0) == -1.0
        assert p.at(2.5) == pytest.approx(-0.5)

    def test_vector_queries(self):
        """Array queries return arrays of the same shape."""
        p = linear_path([0.0, 2.0], [0.0, 4.0])

        np.testing.assert_allclose(p.at(np.array([0.5, 1.0, 1.5])), [1.0, 2.0, 3.0])

    def test_rejects_decreasing_knots(self):
        """Knots must be strictly increasing."""
        with pytest.raises(ParameterError):
            step_path([0.0, 2.0, 1.0], [0.0, 1.0, 2.0])

    def test_rejects_left_limits_on_step_paths(self):
        """Step paths derive their left limits."""
        with pytest.raises(ParameterError):
            GridPath(np.array([0.0, 1.0]), np.array([0.0, 1.0]), "step", None, np.array([0.0, 0.0]))

    def test_arrays_are_read_only(self):
        """Paths are immutable."""
        p = step_path([0.0, 1.0], [0.0, 1.0])

        with pytest.raises(ValueError):
            p.values[0] = 5.0

    def test_write_path_csv(self, tmp_path):
        """Debug export has (t, value, mode) columns."""
        p = step_path([0.0, 1.0], [0.0, 2.5])

        write_path_csv(p, tmp_path / "p.csv")
        rows = read_csv(tmp_path / "p.csv")

        assert list(rows[0].keys()) == ["t", "value", "mode"]
        assert float(rows[1]["value"]) == 2.5
        assert rows[1]["mode"] == "step"


class TestReflect:
    def test_step_example(self):
        """phi(f) = f - running inf on a step path."""
        p = step_path([0.0, 1.0, 2.0, 3.0], [0.0, -1.0, 2.0, -3.0])

        np.testing.assert_array_equal(reflect(p).values, [0.0, 0.0, 3.0, 0.0])

    def test_matches_brute_force_on_random_step_paths(self, rng):
        """Reflection agrees with the prefix-minimum definition on 1000 paths of 1000 points."""
        size = 1000
        prefix = np.tril(np.ones((size, size), dtype=bool))
        knots = np.arange(float(size))
        for _ in range(1000):
            values = np.cumsum(rng.standard_normal(size))

            np.testing.assert_allclose(reflect(step_path(knots, values)).values,
                                       brute_force_reflection(values, prefix))

    def test_inf_stability(self, rng):
        """sup |phi(f) - phi(g)| <= 2 sup |f - g|."""
        for _ in range(200):
            f = np.cumsum(rng.standard_normal(100))
            g = f + rng.uniform(-1, 1, 100)
            knots = np.arange(100.0)
            lhs = np.abs(reflect(step_path(knots, f)).values - reflect(step_path(knots, g)).values).max()

            assert lhs <= 2 * np.abs(f - g).max() + 1e-12

    def test_running_infimum_is_delta_stable(self, rng):
        """Step paths within delta of each other have running infima within delta."""
        knots = np.arange(100.0)
        fine = np.union1d(knots, knots + 0.5)
        for _ in range(1000):
            f = step_path(knots, np.cumsum(rng.standard_normal(100)))
            g = step_path(fine, f.at(fine) + rng.uniform(-0.5, 0.5, fine.size) * rng.uniform())
            delta = sup_distance(f, g, 1.0)

            assert sup_distance(running_infimum(f), running_infimum(g), 1.0) <= delta + 1e-12

    def test_shift_invariance_step(self, rng):
        """phi(f + c) = phi(f)."""
        p = step_path(np.arange(300.0), np.cumsum(rng.standard_normal(300)))

        for c in (-7.5, 0.25, 40.0):
            np.testing.assert_allclose(reflect(p.shifted(c)).values, reflect(p).values, atol=1e-9)

    def test_shift_invariance_linear_with_jumps(self, rng):
        """phi(f + c) = phi(f) for a netput with upward jumps and linear drift."""
        knots = np.arange(60.0)
        values = np.cumsum(rng.standard_normal(60))
        left = values - np.where(rng.uniform(size=60) < 0.3, rng.exponential(2.0, 60), 0.0)
        left[0] = values[0]
        p = linear_path(knots, values, left=left)

        for c in (-3.0, 12.5):
            shifted = reflect(p.shifted(c))

            assert sup_distance(shifted, reflect(p), 1e-3) < 1e-9
            np.testing.assert_allclose(shifted.left_at(knots), reflect(p).left_at(knots), atol=1e-9)

    def test_single_job_netput(self):
        """Netput of one job (T=1, V=2, c=1) reflects to a triangle emptying at t=3."""
        netput = linear_path([0.0, 1.0, 4.0], [0.0, 1.0, -2.0], left=[0.0, -1.0, -2.0])

        w = reflect(netput)

        assert w.at(1.0) == pytest.approx(2.0)
        assert w.left_at(1.0) == pytest.approx(0.0)
        assert w.at(2.0) == pytest.approx(1.0)
        assert w.at(3.0) == pytest.approx(0.0, abs=1e-12)
        assert w.at(3.5) == pytest.approx(0.0, abs=1e-12)

    def test_linear_reflection_exact_between_knots(self, rng):
        """Crossing knots make phi exact on a fine grid for continuous linear paths."""
        for _ in range(50):
            knots = np.arange(40.0)
            values = np.concatenate([[0.0], np.cumsum(rng.standard_normal(39))])
            p = linear_path(knots, values)
            fine = np.linspace(0, 39, 2000)
            f = p.at(fine)
            expected = f - np.minimum(np.minimum.accumulate(f), [
                values[: int(np.floor(t)) + 1].min() for t in fine])

            np.testing.assert_allclose(reflect(p).at(fine), expected, atol=1e-9)

    def test_non_negative(self, rng):
        """phi(f) >= 0."""
        values = np.cumsum(rng.standard_normal(500))
        p = linear_path(np.arange(500.0), values)

        assert reflect(p).values.min() >= -1e-12

    def test_running_infimum_linear(self):
        """Running infimum of a continuous linear path."""
        p = linear_path([0.0, 1.0, 2.0], [0.0, -1.0, 1.0])

        np.testing.assert_array_equal(running_infimum(p).values, [0.0, -1.0, -1.0])


class TestRefinableBrownianPath:
    def test_cached_values_repeat(self):
        """Repeated queries return the cached value."""
        bm = sample_bm(1.0, 2, seed=1)

        first = bm.at(0.3)

        assert bm.at(0.3) == first
        assert bm.at(np.array([0.3]))[0] == first

    def test_starts_at_zero(self):
        """B(0) = 0."""
        assert sample_bm(1.0, 5, seed=3).at(0.0) == 0.0

    def test_refined_variance_and_covariance(self):
        """Bridge refinement keeps Var B(t) = t and Cov(B(s), B(t)) = s ^ t."""
        draws = np.array([sample_bm(1.0, 2, seed=s).at(np.array([0.3, 0.7])) for s in range(4000)])

        cov = np.cov(draws.T)

        assert cov[0, 0] == pytest.approx(0.3, abs=0.05)
        assert cov[1, 1] == pytest.approx(0.7, abs=0.08)
        assert cov[0, 1] == pytest.approx(0.3, abs=0.05)

    def test_extends_beyond_last_knot(self):
        """Unpinned paths extend with independent increments."""
        draws = np.array([sample_bm(1.0, 2, seed=s).at(2.0) for s in range(3000)])

        assert draws.var() == pytest.approx(2.0, abs=0.25)

    def test_negative_time_is_domain_error(self):
        """Brownian paths live on [0, inf)."""
        with pytest.raises(DomainError):
            sample_bm(1.0, 2, seed=1).at(-0.1)

    def test_to_grid_snapshot(self):
        """Snapshot holds every cached knot."""
        bm = sample_bm(1.0, 3, seed=2)
        bm.at(0.25)

        grid = bm.to_grid()

        assert 0.25 in grid.knots
        assert grid.at(0.25) == bm.at(0.25)

    def test_invalid_arguments(self):
        """Horizon and grid size are checked."""
        with pytest.raises(ParameterError):
            sample_bm(0.0, 2, seed=1)
        with pytest.raises(ParameterError):
            sample_bm(1.0, 1, seed=1)


class TestBrownianBridge:
    def test_pinned_at_both_ends(self):
        """B^br(0) = B^br(1) = 0."""
        bridge = bridge_from_bm(sample_bm(1.0, 2, seed=4))

        assert bridge.at(0.0) == 0.0
        assert bridge.at(1.0) == 0.0

    def test_identity_with_motion(self):
        """bridge(t) = bm(t) - t bm(1) at every query."""
        bm = sample_bm(1.0, 2, seed=5)
        bridge = BrownianBridge(bm)
        ts = np.array([0.1, 0.5, 0.9])

        values = bridge.at(ts)

        np.testing.assert_allclose(values, bm.at(ts) - ts * bm.at(1.0))

    def test_query_past_end(self):
        """The bridge ends at 1."""
        bridge = bridge_from_bm(sample_bm(1.0, 2, seed=4))

        with pytest.raises(DomainError):
            bridge.at(1.5)

    def test_needs_unit_horizon(self):
        """Only a motion on [0, 1] makes a bridge."""
        with pytest.raises(ParameterError):
            bridge_from_bm(sample_bm(2.0, 2, seed=1))


class TestDyadicBridge:
    def test_pinned_and_sized(self):
        """2^J + 1 knots, zero at both ends."""
        b = sample_bridge_dyadic(6, seed=1)

        assert len(b) == 65
        assert b.values[0] == 0.0
        assert b.values[-1] == 0.0

    def test_midpoint_variance(self):
        """Var B^br(1/2) = 1/4."""
        draws = np.array([sample_bridge_dyadic(2, seed=s).at(0.5) for s in range(4000)])

        assert draws.var() == pytest.approx(0.25, abs=0.03)

    def test_depth_limits(self):
        """Depth below 1 is a parameter error; above the budget a resource error."""
        with pytest.raises(ParameterError):
            sample_bridge_dyadic(0, seed=1)
        with pytest.raises(ResourceError):
            sample_bridge_dyadic(25, seed=1)


class TestTimeChangeAndDistance:
    def test_time_change(self):
        """(f o tau)(t) evaluated on tau's knots."""
        f = linear_path([0.0, 1.0], [0.0, 2.0])
        tau = step_path([0.0, 1.0], [0.25, 0.5])

        np.testing.assert_allclose(time_change(f, tau).values, [0.5, 1.0])

    def test_negative_time_change(self):
        """tau must be non-negative."""
        f = linear_path([0.0, 1.0], [0.0, 2.0])
        with pytest.raises(DomainError):
            time_change(f, step_path([0.0, 1.0], [-0.1, 0.5]))

    def test_sup_distance_on_common_domain(self):
        """Distance is taken where both paths are defined."""
        p1 = step_path([0.0, 1.0], [0.0, 1.0])
        p2 = step_path([0.0, 2.0], [0.0, 1.0])

        assert sup_distance(p1, p2, 0.1) == 1.0

    def test_sup_distance_sees_left_limits(self):
        """A jump one path makes earlier than the other is caught."""
        p1 = step_path([0.0, 1.0, 3.0], [0.0, 1.0, 1.0])
        p2 = step_path([0.0, 2.0, 3.0], [0.0, 1.0, 1.0])

        assert sup_distance(p1, p2, 10.0) == 1.0

    def test_disjoint_domains(self):
        """Paths without a common domain cannot be compared."""
        p1 = step_path([0.0, 1.0], [0.0, 1.0])
        p2 = step_path([2.0, 3.0], [0.0, 1.0])

        with pytest.raises(ParameterError):
            sup_distance(p1, p2, 0.1)

    def test_resolution_must_be_positive(self):
        p = step_path([0.0, 1.0], [0.0, 1.0])
        with pytest.raises(ParameterError):
            sup_distance(p, p, 0.0)

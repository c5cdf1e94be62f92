import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from clustinf.errors import InputError, InvalidPartitionError
from clustinf.geometry import (
    Location,
    ball_growth_profile,
    balance_ratio,
    boundary_fraction,
    geo_dissimilarity,
    panel_locations,
    reflect_centroids,
    surrogate_centroids,
    validate,
)
from clustinf.partition import Partition

coords_strategy = arrays(
    np.float64, st.tuples(st.integers(2, 12), st.just(2)),
    elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False),
)


class TestGeoDissimilarity:
    def test_same_place_different_period_is_zero(self):
        d = geo_dissimilarity([Location(34.5, 69.2, 1), Location(34.5, 69.2, 2)])
        assert d[0, 1] == 0.0

    def test_three_four_five(self):
        d = geo_dissimilarity([Location(0, 0), Location(3, 4)])
        assert d[0, 1] == pytest.approx(5.0, abs=1e-15)

    def test_matches_double_loop(self, rng):
        pts = rng.normal(size=(5, 2))
        d = geo_dissimilarity(pts)
        for i, j in itertools.product(range(5), repeat=2):
            ref = np.sqrt((pts[i, 0] - pts[j, 0]) ** 2 + (pts[i, 1] - pts[j, 1]) ** 2)
            assert abs(d[i, j] - ref) <= 1e-12

    def test_array_with_period_column(self):
        d = geo_dissimilarity(np.array([[1.0, 2.0, 1], [1.0, 2.0, 2], [4.0, 6.0, 1]]))
        assert d[0, 1] == 0 and d[0, 2] == pytest.approx(5.0)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(InputError):
            geo_dissimilarity([Location(0, 0), Location(bad, 1)])

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            geo_dissimilarity([])

    @settings(max_examples=40, deadline=None)
    @given(coords_strategy)
    def test_output_is_a_metric(self, pts):
        report = validate(geo_dissimilarity(pts), check_triangle=True)
        assert report.ok, report.summary()


class TestValidate:
    def test_all_ones_off_diagonal_is_clean(self):
        d = np.ones((4, 4)) - np.eye(4)
        assert validate(d, check_triangle=True).ok

    def test_asymmetry_reported(self):
        d = np.zeros((2, 2))
        d[0, 1], d[1, 0] = 1.0, 2.0
        assert validate(d).asymmetric == [(0, 1)]

    def test_triangle_violation_reported(self):
        d = np.array([[0, 1, 3], [1, 0, 1], [3, 1, 0]], dtype=float)
        report = validate(d, check_triangle=True)
        assert (0, 1, 2) in report.triangle
        assert not validate(d, check_triangle=False).triangle

    def test_negative_and_diagonal(self):
        d = np.array([[1.0, -1.0], [-1.0, 0.0]])
        report = validate(d)
        assert report.nonzero_diagonal == [0]
        assert (0, 1) in report.negative


class TestBalanceRatio:
    @pytest.mark.parametrize("sizes, expected", [((5, 5), 1.0), ((2, 8), 0.25), ((3, 4, 5), 0.6)])
    def test_examples(self, sizes, expected):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        assert balance_ratio(Partition(labels)) == pytest.approx(expected)

    def test_empty_cluster_rejected(self):
        with pytest.raises(InvalidPartitionError):
            balance_ratio(Partition(np.array([0, 0, 2, 2]), k=3))

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=30).filter(lambda v: len(set(v)) == 5))
    def test_label_permutation_invariant(self, labels):
        labels = np.asarray(labels)
        perm = np.array([3, 0, 4, 1, 2])
        assert balance_ratio(labels) == balance_ratio(perm[labels])


class TestBoundaryFraction:
    line = geo_dissimilarity(np.column_stack([np.arange(6.0), np.zeros(6)]))
    halves = np.array([0, 0, 0, 1, 1, 1])

    def test_zero_radius(self):
        assert boundary_fraction(self.halves, self.line, 0.0) == 0.0

    def test_radius_beyond_diameter(self):
        labels = np.array([0, 0, 1, 1, 1, 1])
        assert boundary_fraction(labels, self.line, 10.0) == pytest.approx(4 / 2)

    def test_collinear_halves_by_enumeration(self):
        # only points 2 and 3 lie within distance 1 of the other half
        assert boundary_fraction(self.halves, self.line, 1.0) == pytest.approx(1 / 3)

    def test_single_cluster_rejected(self):
        with pytest.raises(InvalidPartitionError):
            boundary_fraction(np.zeros(6, dtype=int), self.line, 1.0)

    def test_negative_radius_rejected(self):
        with pytest.raises(InputError):
            boundary_fraction(self.halves, self.line, -1.0)

    @given(st.lists(st.floats(0, 8), min_size=2, max_size=6))
    def test_monotone_in_radius(self, radii):
        values = [boundary_fraction(self.halves, self.line, r) for r in sorted(radii)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestBallGrowth:
    def test_grid_interior_ball(self):
        grid = np.array(list(itertools.product(range(10), range(10))), dtype=float)
        row = ball_growth_profile(geo_dissimilarity(grid), [1.0])[0]
        assert row.max == 5 and row.min == 3

    def test_zero_radius_with_duplicates(self):
        pts = np.array([[0, 0], [0, 0], [1, 1], [2, 5]], dtype=float)
        row = ball_growth_profile(geo_dissimilarity(pts), [0.0])[0]
        assert row.min >= 1 and row.max == 2

    def test_diameter_covers_everything(self, rng):
        d = geo_dissimilarity(rng.normal(size=(15, 2)))
        rows = ball_growth_profile(d, [d.max(), np.inf])
        assert all(r.min == r.max == 15 for r in rows)

    def test_unsorted_radii_rejected(self):
        with pytest.raises(InputError):
            ball_growth_profile(np.zeros((2, 2)), [1.0, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(coords_strategy, st.lists(st.floats(0, 100), min_size=1, max_size=5))
    def test_monotone_per_center(self, pts, radii):
        d = geo_dissimilarity(pts)
        rows = ball_growth_profile(d, sorted(radii))
        mins = [r.min for r in rows]
        maxs = [r.max for r in rows]
        assert mins == sorted(mins) and maxs == sorted(maxs)


class TestLayouts:
    def test_surrogate_is_deterministic(self):
        assert np.array_equal(surrogate_centroids(205), surrogate_centroids(205))
        assert surrogate_centroids(205).shape == (205, 2)

    def test_reflection_quadruples(self):
        base = surrogate_centroids(10)
        out = reflect_centroids(base)
        assert out.shape == (40, 2)
        np.testing.assert_allclose(out[10:20, 0], 58.0 - base[:, 0])
        np.testing.assert_allclose(out[20:30, 1], 150.0 - base[:, 1])

    def test_panel_is_unit_major(self):
        unit, period, coords = panel_locations(np.array([[1.0, 2.0], [3.0, 4.0]]), 2)
        assert unit.tolist() == [0, 0, 1, 1]
        assert period.tolist() == [1, 2, 1, 2]
        assert coords[1].tolist() == [1.0, 2.0]

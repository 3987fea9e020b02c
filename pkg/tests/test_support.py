import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from conftest import EQUILATERAL_X, random_diag_dataset, random_full_dataset
from hetnpmle.exceptions import DeltaOutOfRange, GridTooLarge
from hetnpmle.model import Dataset, Full
from hetnpmle.support import (
    BBox,
    Ball,
    Hull,
    Region,
    build_grid,
    default_delta,
    discretization_bound,
    lattice_size,
    support_region,
)


def _sample(region, rng, k=10_000):
    lo, hi = region.bounds
    pts = rng.uniform(lo, hi, size=(4 * k, lo.size))
    pts = pts[region.contains(pts)]
    return pts[:k]


class TestSupportRegion:
    def test_homoscedastic_is_hull(self):
        r = support_region(Dataset.from_arrays(EQUILATERAL_X, 0.7))
        assert isinstance(r, Hull)
        assert r.diameter == pytest.approx(math.sqrt(3), rel=1e-12)

    def test_proportional_full_is_hull(self):
        S = np.array([[2.0, 0.5], [0.5, 1.0]])
        d = Dataset.from_arrays(EQUILATERAL_X, np.stack([S, 2 * S, 0.5 * S]))
        assert isinstance(support_region(d), Hull)

    def test_swapped_axes_is_bbox(self):
        X = np.array([[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]])
        V = np.array([[5.0, 0.05], [5.0, 0.05], [0.05, 5.0], [0.05, 5.0]])
        r = support_region(Dataset.from_arrays(X, V))
        assert isinstance(r, BBox)
        np.testing.assert_array_equal(r.lower, [-1.0, -1.0])
        np.testing.assert_array_equal(r.upper, [1.0, 1.0])

    def test_general_is_ball(self):
        # eigenvalues 0.01 and 1: kappa = 100
        U = np.array([[1.0, 1.0], [-1.0, 1.0]]) / math.sqrt(2)
        A = U @ np.diag([1.0, 0.01]) @ U.T
        B = np.diag([1.0, 0.5])
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        r = support_region(Dataset.from_arrays(X, np.stack([A, B])))
        assert isinstance(r, Ball)
        np.testing.assert_allclose(r.center, [0.0, 0.0])
        assert r.radius == pytest.approx(100.0, rel=1e-9)

    def test_contains_data(self):
        rng = np.random.default_rng(0)
        for d in (random_diag_dataset(rng, 20, 2), random_full_dataset(rng, 20, 2),
                  Dataset.from_arrays(rng.normal(size=(20, 2)), 0.5)):
            for mode in ("hull", "bbox", "ball"):
                assert support_region(d, mode).contains(d.X, tol=1e-9).all()

    def test_nesting_homoscedastic(self):
        rng = np.random.default_rng(1)
        d = Dataset.from_arrays(rng.normal(size=(30, 2)), 0.5)
        hull, box, ball = (support_region(d, m) for m in ("hull", "bbox", "ball"))
        pts = _sample(hull, rng, 2000)
        assert box.contains(pts, tol=1e-12).all()
        # a box corner can lie outside the kappa = 1 ball, so only the hull nests in both
        assert ball.contains(pts, tol=1e-12).all()

    def test_region_dict_round_trip(self):
        for r in (BBox(np.zeros(2), np.ones(2)), Ball(np.ones(3), 2.0), Hull(EQUILATERAL_X)):
            r2 = Region.from_dict(r.to_dict())
            assert type(r2) is type(r) and r2.diameter == r.diameter


class TestBuildGrid:
    def test_unit_square(self):
        g = build_grid(BBox(np.zeros(2), np.ones(2)), 0.5)
        assert g.m == 9
        assert {tuple(a) for a in g.atoms} == {(x, y) for x in (0, 0.5, 1) for y in (0, 0.5, 1)}

    def test_ball_1d(self):
        g = build_grid(Ball(np.zeros(1), 1.0), 1.0)
        np.testing.assert_array_equal(np.sort(g.atoms[:, 0]), [-1.0, 0.0, 1.0])

    @pytest.mark.parametrize("region", [BBox(np.zeros(2), np.array([1.0, 2.0])), Ball(np.zeros(2), 1.3),
                                        Hull(EQUILATERAL_X), Ball(np.zeros(3), 1.0)])
    def test_refinement_and_covering(self, region):
        rng = np.random.default_rng(2)
        for delta in (0.4, 0.2):
            g, g2 = build_grid(region, delta), build_grid(region, delta / 2)
            assert g2.m >= g.m
            assert len({tuple(a) for a in g.atoms}) == g.m
            dist, _ = cKDTree(g.atoms).query(_sample(region, rng))
            assert dist.max() <= math.sqrt(region.dim) / 2 * delta + 1e-12

    def test_nested_lattices(self):
        region = BBox(np.array([-1.0, 0.0]), np.array([1.0, 1.0]))
        coarse = {tuple(a) for a in build_grid(region, 0.5).atoms}
        fine = {tuple(np.round(a, 12)) for a in build_grid(region, 0.25).atoms}
        assert {tuple(np.round(a, 12)) for a in coarse} <= fine

    def test_too_large(self):
        with pytest.raises(GridTooLarge):
            build_grid(BBox(np.zeros(2), np.ones(2)), 1e-3, cap=1000)

    def test_extra_atoms_deduplicated(self):
        g = build_grid(BBox(np.zeros(1), np.ones(1)), 0.5, extra_atoms=[[0.5], [0.25]])
        np.testing.assert_array_equal(g.atoms[:, 0], [0.0, 0.5, 1.0, 0.25])

    def test_degenerate_single_point(self):
        g = build_grid(support_region(Dataset.from_arrays([[1.0, 2.0]], 1.0)), 0.1)
        np.testing.assert_array_equal(g.atoms, [[1.0, 2.0]])


class TestDiscretizationBound:
    def test_plug_in(self):
        assert discretization_bound(2, 1.0, 2.0, 0.1) == pytest.approx(0.17, rel=1e-12)

    def test_vanishes(self):
        assert discretization_bound(2, 1.0, 2.0, 1e-9) < 1e-16

    def test_out_of_range(self):
        with pytest.raises(DeltaOutOfRange):
            discretization_bound(2, 1.0, 2.0, 0.4)
        with pytest.raises(DeltaOutOfRange):
            discretization_bound(2, 1.0, 2.0, 0.0)

    def test_default_delta_meets_target(self):
        rng = np.random.default_rng(3)
        d = random_diag_dataset(rng, 40, 2)
        r = support_region(d)
        delta, coarsened = default_delta(d, r)
        assert not coarsened
        bound = discretization_bound(2, d.k_lower, r.diameter, delta)
        assert bound <= math.log(40) ** 3 / 40 * (1 + 1e-9)

    def test_default_delta_coarsens(self, caplog):
        rng = np.random.default_rng(4)
        d = random_diag_dataset(rng, 200, 2, low=0.05, high=0.1, spread=5.0)
        r = support_region(d)
        delta, coarsened = default_delta(d, r, cap=5000)
        assert coarsened and lattice_size(r, delta) <= 5000
        assert "coarsened" in caplog.text

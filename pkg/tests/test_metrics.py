import itertools
import math

import numpy as np
import pytest

from hetnpmle.exceptions import DimensionMismatch, LengthMismatch, SizeLimit
from hetnpmle.metrics import avg_hellinger_sq, loglik_gap, regret, w2_to_point_mass, wasserstein2
from hetnpmle.model import Dataset, MixingMeasure


def brute_force_w2(G, H):
    """Minimum cost over every vertex of the transport polytope."""
    m, k = G.n_atoms, H.n_atoms
    C = ((G.atoms[:, None, :] - H.atoms[None, :, :]) ** 2).sum(-1).ravel()
    A = np.vstack([np.kron(np.eye(m), np.ones((1, k))), np.kron(np.ones((1, m)), np.eye(k))])[:-1]
    b = np.concatenate([G.weights, H.weights])[:-1]
    r = m + k - 1
    best = math.inf
    for cols in itertools.combinations(range(m * k), r):
        B = A[:, cols]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xb = np.linalg.solve(B, b)
        if np.all(xb >= -1e-12):
            best = min(best, float(C[list(cols)] @ xb))
    return best


def random_measure(rng, m, p=2):
    return MixingMeasure(rng.normal(size=(m, p)) * 2, rng.dirichlet(np.ones(m)))


class TestWasserstein:
    def test_point_masses(self):
        a, b = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
        plan = wasserstein2(MixingMeasure.point_mass(a), MixingMeasure.point_mass(b))
        assert plan.cost == pytest.approx(np.sum((a - b) ** 2), rel=1e-15)

    def test_split_to_origin(self):
        G = MixingMeasure([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5])
        assert wasserstein2(G, MixingMeasure.point_mass([0.0, 0.0])).cost == pytest.approx(1.0)
        assert w2_to_point_mass(G, [0.0, 0.0]) == pytest.approx(1.0)
        assert w2_to_point_mass(MixingMeasure.point_mass([3.0, 1.0]), [3.0, 1.0]) == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            G = random_measure(rng, int(rng.integers(1, 5)))
            H = random_measure(rng, int(rng.integers(1, 5)))
            assert wasserstein2(G, H).cost == pytest.approx(brute_force_w2(G, H), abs=1e-9)

    def test_marginals(self):
        rng = np.random.default_rng(1)
        G, H = random_measure(rng, 7), random_measure(rng, 5)
        plan = wasserstein2(G, H)
        P = np.zeros((7, 5))
        for i, j, mass in plan.flows:
            assert mass >= 0
            P[i, j] = mass
        np.testing.assert_allclose(P.sum(axis=1), G.weights, atol=1e-9)
        np.testing.assert_allclose(P.sum(axis=0), H.weights, atol=1e-9)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            A, B, C = (random_measure(rng, int(rng.integers(1, 5))) for _ in range(3))
            ab, bc, ac = (wasserstein2(x, y).distance for x, y in ((A, B), (B, C), (A, C)))
            assert ac <= ab + bc + 1e-9

    def test_point_mass_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            G = random_measure(rng, int(rng.integers(1, 8)), p=3)
            mu = rng.normal(size=3)
            ref = wasserstein2(G, MixingMeasure.point_mass(mu)).distance
            assert w2_to_point_mass(G, mu) == pytest.approx(ref, abs=1e-10)

    def test_size_limit(self):
        rng = np.random.default_rng(4)
        with pytest.raises(SizeLimit):
            wasserstein2(random_measure(rng, 10), random_measure(rng, 10), cap=99)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            wasserstein2(MixingMeasure.point_mass([0.0]), MixingMeasure.point_mass([0.0, 1.0]))


class TestHellinger:
    def test_identical(self):
        rng = np.random.default_rng(5)
        G = random_measure(rng, 3, p=1)
        d = Dataset.from_arrays(np.zeros((4, 1)), np.array([[0.5], [0.5], [1.0], [2.0]]))
        assert avg_hellinger_sq(G, G, d, method="quadrature").value == pytest.approx(0.0, abs=1e-9)
        mc = avg_hellinger_sq(G, G, d, n_samples=1000)
        assert mc.value == pytest.approx(0.0, abs=1e-12) and mc.std_error == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        d = Dataset.from_arrays(np.zeros((1, 1)), 1.0)
        est = avg_hellinger_sq(MixingMeasure.point_mass([0.0]), MixingMeasure.point_mass([2.0]), d,
                               method="quadrature")
        assert est.value == pytest.approx(1 - math.exp(-0.5), abs=1e-4)
        assert est.value == pytest.approx(0.393469, abs=1e-6)
        assert est.std_error == 0.0

    def test_mc_vs_quadrature(self):
        rng = np.random.default_rng(6)
        for k in range(10):
            G, H = random_measure(rng, 3, p=1), random_measure(rng, 4, p=1)
            d = Dataset.from_arrays(np.zeros((5, 1)), rng.uniform(0.3, 2.0, size=(5, 1)))
            q = avg_hellinger_sq(G, H, d, method="quadrature")
            mc = avg_hellinger_sq(G, H, d, n_samples=20_000, seed=k)
            assert abs(mc.value - q.value) <= 3 * mc.std_error + 1e-12

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(7)
        G, H = random_measure(rng, 3), random_measure(rng, 2)
        d = Dataset.from_arrays(np.zeros((3, 2)), 0.7)
        a = avg_hellinger_sq(G, H, d, n_samples=5000, seed=1)
        b = avg_hellinger_sq(H, G, d, n_samples=5000, seed=1)
        assert 0.0 <= a.value <= 1.0
        assert abs(a.value - b.value) <= 3 * (a.std_error + b.std_error)

    def test_invalid(self):
        G = MixingMeasure.point_mass([0.0, 0.0])
        d = Dataset.from_arrays(np.zeros((1, 2)), 1.0)
        with pytest.raises(ValueError):
            avg_hellinger_sq(G, G, d, method="quadrature")
        with pytest.raises(ValueError):
            avg_hellinger_sq(G, G, d, n_samples=0)


class TestRegret:
    def test_values(self):
        x = np.arange(6.0).reshape(3, 2)
        assert regret(x, x) == 0.0
        assert regret([[1.0, 0.0]], [[0.0, 0.0]]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            regret(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_loglik_gap_zero_for_same(self):
        G = MixingMeasure([[0.0], [1.0]], [0.3, 0.7])
        d = Dataset.from_arrays([[0.2], [0.9]], 1.0)
        assert loglik_gap(d, G, G) == 0.0
        assert loglik_gap(d, G, MixingMeasure.point_mass([5.0])) > 0

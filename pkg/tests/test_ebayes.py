import math

import numpy as np
import pytest

from conftest import random_diag_dataset, random_full_dataset, random_rotation
from hetnpmle.ebayes import (
    RegularizationPolicy,
    denoise,
    log_marginal_density,
    posterior_mean_direct,
    posterior_mean_tweedie,
    posterior_means,
)
from hetnpmle.exceptions import AllResponsibilitiesUnderflow, DimensionMismatch, ZeroDensity
from hetnpmle.kernels import kernel_matrix
from hetnpmle.model import AffineMap, Dataset, Full, Isotropic, MixingMeasure, pushforward, transform_dataset
from hetnpmle.sim import Circle, NoiseSpec, generate
from hetnpmle.solver import SolverConfig, solve_weights
from hetnpmle.support import build_grid, support_region


def _random_case(rng):
    p = int(rng.integers(1, 4))
    A = rng.normal(size=(p, p))
    S = Full(A @ A.T + 0.5 * np.eye(p))
    m = int(rng.integers(1, 6))
    G = MixingMeasure(rng.normal(size=(m, p)), rng.dirichlet(np.ones(m)))
    return rng.normal(size=p) * 1.5, S, G


class TestDirect:
    def test_single_atom(self):
        G = MixingMeasure.point_mass([1.0, -2.0])
        for x in ([0.0, 0.0], [50.0, 3.0]):
            np.testing.assert_array_equal(posterior_mean_direct(x, 1.0, G).mean, [1.0, -2.0])

    def test_symmetric(self):
        G = MixingMeasure([[-1.0], [1.0]], [0.5, 0.5])
        assert posterior_mean_direct([0.0], 1.0, G).mean[0] == pytest.approx(0.0, abs=1e-16)

    def test_tanh(self):
        G = MixingMeasure([[-1.0], [1.0]], [0.5, 0.5])
        s = posterior_mean_direct([1.0], 1.0, G)
        assert s.mean[0] == pytest.approx(math.tanh(1.0), abs=1e-15)
        assert s.mean[0] == pytest.approx(0.761594, abs=1e-6)
        assert s.responsibilities.sum() == pytest.approx(1.0, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            posterior_mean_direct([0.0, 1.0], 1.0, MixingMeasure.point_mass([0.0]))

    def test_underflow(self):
        G = MixingMeasure([[0.0], [1.0]], [1.0, 0.0])
        with pytest.raises(AllResponsibilitiesUnderflow):
            posterior_mean_direct([1e200], 1.0, G)


class TestTweedie:
    def test_single_atom(self):
        S = Full([[2.0, 0.5], [0.5, 1.0]])
        s = posterior_mean_tweedie([0.3, -0.7], S, MixingMeasure.point_mass([1.0, 1.0]))
        np.testing.assert_allclose(s.mean, [1.0, 1.0], atol=1e-14)

    def test_matches_direct(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x, S, G = _random_case(rng)
            a = posterior_mean_tweedie(x, S, G).mean
            b = posterior_mean_direct(x, S, G).mean
            assert np.linalg.norm(a - b) <= 1e-8 * (1 + np.linalg.norm(x))

    def test_huge_rho_returns_x(self):
        G = MixingMeasure([[-1.0], [1.0]], [0.5, 0.5])
        x = np.array([30.0])
        s = posterior_mean_tweedie(x, 1.0, G, RegularizationPolicy(1e6))
        assert s.used_regularization
        assert s.mean[0] == pytest.approx(30.0, abs=1e-12)

    def test_floor_binds_iff_below(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x, S, G = _random_case(rng)
            rho = float(np.exp(rng.uniform(-8, 0)))
            policy = RegularizationPolicy(rho)
            s = posterior_mean_tweedie(x, S, G, policy)
            f = math.exp(log_marginal_density(Dataset.from_arrays(x[None], S.matrix[None]), G)[0])
            assert s.used_regularization == (f < rho / math.sqrt(math.exp(S.logdet)))

    def test_zero_density(self):
        G = MixingMeasure.point_mass([0.0])
        with pytest.raises(ZeroDensity):
            posterior_mean_tweedie([1e3], 1.0, G)
        s = posterior_mean_tweedie([1e3], 1.0, G, RegularizationPolicy.default(10, 1))
        assert s.used_regularization and np.isfinite(s.mean).all()

    def test_default_rho(self):
        assert RegularizationPolicy.default(100, 2).rho == pytest.approx(1 / (200 * math.pi))
        with pytest.raises(ValueError):
            RegularizationPolicy(0.0)


class TestDenoise:
    def test_within_atom_range(self):
        rng = np.random.default_rng(2)
        d = Dataset.from_arrays(rng.normal(size=(40, 1)) * 2, 0.5)
        grid = build_grid(support_region(d), 0.1)
        w, _ = solve_weights(kernel_matrix(d, grid.atoms), SolverConfig())
        G = MixingMeasure(grid.atoms, w).pruned(0.0)
        means = np.array([s.mean for s in denoise(d, G)])
        assert means.min() >= G.atoms.min() - 1e-12 and means.max() <= G.atoms.max() + 1e-12

    def test_convex_hull_of_support(self):
        from scipy.spatial import Delaunay

        rng = np.random.default_rng(3)
        G = MixingMeasure(rng.normal(size=(6, 2)), rng.dirichlet(np.ones(6)))
        d = random_full_dataset(rng, 30, 2)
        means, R, used, _ = posterior_means(d, G)
        assert not used.any()
        assert np.all(Delaunay(G.atoms).find_simplex(means, tol=1e-12) >= 0)
        np.testing.assert_allclose(R.sum(axis=1), 1.0, atol=1e-14)

    def test_shrinkage(self):
        data, _ = generate(Circle(), NoiseSpec(), 400, seed=4)
        G = Circle().oracle_measure()
        means = np.array([s.mean for s in denoise(data, G)])
        assert np.trace(np.cov(means.T)) <= np.trace(np.cov(data.X.T))

    def test_equivariance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            d = random_diag_dataset(rng, 15, 2)
            G = MixingMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
            T = AffineMap(random_rotation(rng, 2), rng.normal(size=2) * 4)
            policy = RegularizationPolicy.default(15, 2)
            a = posterior_means(d, G, policy)[0]
            b = posterior_means(transform_dataset(d, T), pushforward(G, T), policy)[0]
            np.testing.assert_allclose(b, T(a), atol=1e-9)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(6)
        d = random_full_dataset(rng, 10, 3)
        G = MixingMeasure(rng.normal(size=(4, 3)), rng.dirichlet(np.ones(4)))
        policy = RegularizationPolicy(0.05)
        means, _, used, _ = posterior_means(d, G, policy)
        for i, (x, S) in enumerate(zip(d.X, d.covariances)):
            s = posterior_mean_tweedie(x, S, G, policy)
            np.testing.assert_allclose(means[i], s.mean, atol=1e-10)
            assert used[i] == s.used_regularization

    def test_underflow_fallback(self, caplog):
        G = MixingMeasure([[-1e154], [1e154]], [0.5, 0.5])
        d = Dataset.from_arrays([[1e155], [1e154]], [Isotropic(1.0, 1), Isotropic(1.0, 1)])
        out = denoise(d, G)
        assert out[0].fallback and out[0].mean[0] == 1e154
        assert not out[1].fallback
        assert "underflow" in caplog.text

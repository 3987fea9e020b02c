import json
import math

import numpy as np
import pytest

from hetnpmle.model import Dataset
from hetnpmle.sim import (
    Circle,
    ExperimentConfig,
    NoiseSpec,
    PointMass,
    aggregate,
    generate,
    keyed_rng,
    oracle_posterior_means,
    run_regret_experiment,
    run_w2_trend,
    simulate_once,
)


class TestGenerate:
    def test_circle_norms(self):
        _, theta = generate(Circle(2.0), NoiseSpec(), 500, seed=0)
        np.testing.assert_allclose(np.linalg.norm(theta, axis=1), 2.0, rtol=1e-14)

    def test_deterministic(self):
        a, ta = generate(Circle(), NoiseSpec(), 100, seed=11)
        b, tb = generate(Circle(), NoiseSpec(), 100, seed=11)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(ta, tb)
        np.testing.assert_array_equal(np.stack([c.matrix for c in a.covariances]),
                                      np.stack([c.matrix for c in b.covariances]))
        c, _ = generate(Circle(), NoiseSpec(), 100, seed=12)
        assert not np.array_equal(a.X, c.X)

    def test_streams_independent_of_n(self):
        a, _ = generate(Circle(), NoiseSpec(), 50, seed=3)
        b, _ = generate(Circle(), NoiseSpec(), 80, seed=3)
        np.testing.assert_array_equal(a.X, b.X[:50])

    def test_point_mass_clt(self):
        p, n = 2, 4000
        data, theta = generate(PointMass(np.zeros(p)), NoiseSpec(fixed=(1.0, 1.0)), n, seed=1)
        assert np.all(theta == 0)
        assert np.linalg.norm(data.X.mean(axis=0)) <= 4 * math.sqrt(p / n)

    def test_noise_range(self):
        data, _ = generate(Circle(), NoiseSpec((0.5, 0.75)), 300, seed=2)
        v = np.stack([np.diag(c.matrix) for c in data.covariances])
        assert v.min() >= 0.5 and v.max() <= 0.75

    def test_raw_mse_matches_trace(self):
        data, theta = generate(Circle(), NoiseSpec(), 4000, seed=5)
        mse = np.mean(np.sum((data.X - theta) ** 2, axis=1))
        assert mse == pytest.approx(2 * 0.625, rel=0.1)

    def test_keyed_rng(self):
        a = keyed_rng(1, 0).random(3)
        np.testing.assert_array_equal(a, keyed_rng(1, 0).random(3))
        assert not np.array_equal(a, keyed_rng(1, 1).random(3))

    def test_invalid(self):
        with pytest.raises(ValueError):
            generate(Circle(), NoiseSpec(), 0, seed=0)
        with pytest.raises(ValueError):
            NoiseSpec((0.8, 0.5))


class TestOracle:
    def test_point_mass(self):
        data, _ = generate(PointMass(np.array([1.0, -1.0])), NoiseSpec(), 20, seed=0)
        np.testing.assert_allclose(oracle_posterior_means(data, PointMass(np.array([1.0, -1.0]))),
                                   np.tile([1.0, -1.0], (20, 1)), atol=1e-15)

    def test_center_symmetry(self):
        d = Dataset.from_arrays(np.zeros((1, 2)), 0.6)
        np.testing.assert_allclose(oracle_posterior_means(d, Circle()), 0.0, atol=1e-12)

    def test_refinement(self):
        data, _ = generate(Circle(), NoiseSpec(), 300, seed=4)
        a = oracle_posterior_means(data, Circle(n_oracle_atoms=1024))
        b = oracle_posterior_means(data, Circle(n_oracle_atoms=2048))
        assert np.abs(a - b).max() < 1e-8


class TestExperiments:
    def test_report_schema(self):
        rep = run_regret_experiment(ExperimentConfig(n=150, seed=1))
        for key in ("config", "seed", "n", "p", "mse_raw", "mse_eb", "mse_oracle", "regret", "loglik",
                    "dual_gap", "atoms_kept", "wall_ms"):
            assert key in rep
        json.dumps(rep)
        assert rep["regret"] >= 0

    def test_point_mass_reduction(self):
        rep = run_regret_experiment(ExperimentConfig(design="pointmass", n=1000, seed=0))
        assert rep["mse_eb"] * 5 <= rep["mse_raw"]
        assert rep["mse_oracle"] == pytest.approx(0.0, abs=1e-20)

    def test_discrete_atoms(self):
        from scipy.cluster.hierarchy import fcluster, linkage

        cfg = ExperimentConfig(design="discrete", n=600, seed=0)
        res = simulate_once(cfg)
        G = res.measure
        order = np.argsort(-G.weights)
        k = int(np.searchsorted(np.cumsum(G.weights[order]), 0.99) + 1)
        heavy = G.atoms[order[:k]]
        # the grid NPMLE splits each true atom over a few neighbouring lattice
        # points, so count groups within one noise standard deviation
        sd = math.sqrt(cfg.noise_high)
        groups = fcluster(linkage(heavy, "single"), t=sd, criterion="distance") if k > 1 else [1]
        assert 3 <= len(set(groups)) <= 10
        true_atoms = cfg.prior().measure.atoms
        dist = np.linalg.norm(heavy[:, None] - true_atoms[None], axis=-1).min(axis=1)
        assert dist.max() <= 3 * sd

    def test_circle_oracle_beats_eb(self):
        res = simulate_once(ExperimentConfig(n=300, seed=2))
        r = res.report
        assert r["mse_oracle"] <= r["mse_eb"] <= r["mse_raw"]

    def test_aggregate(self):
        reps = [{"mse_raw": v, "mse_eb": v, "mse_oracle": v, "regret": v, "loglik": v, "dual_gap": v,
                 "atoms_kept": 1, "wall_ms": 1.0} for v in (1.0, 2.0, 4.0)]
        agg = aggregate(reps)
        assert agg["median"]["regret"] == 2.0
        assert agg["mean"]["mse_eb"] == pytest.approx(7 / 3)
        assert agg["std_error"]["atoms_kept"] == 0.0

    def test_w2_trend_ball(self):
        rep = run_w2_trend(PointMass(np.zeros(2)), [50, 200], seeds=[0, 1], region="ball", delta=0.2)
        assert rep["support_in_ball"]
        assert len(rep["medians"]) == 2 and np.isfinite(rep["slope"])
        with pytest.raises(ValueError):
            run_w2_trend(PointMass(np.zeros(2)), [200, 50], seeds=[0])

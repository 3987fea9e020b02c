"""Synthetic designs, oracle posterior means, and experiment runners."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .ebayes import RegularizationPolicy, posterior_means
from .estimator import NPMLE
from .metrics import regret, w2_to_point_mass
from .model import CovarianceSpec, Dataset, Diagonal, MixingMeasure, as_covariance

# stream keys for the keyed generators
_THETA, _VARIANCE, _NOISE = 1, 2, 3


def keyed_rng(seed: int, purpose: int) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``(seed, purpose)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(purpose)])))


# ------------------------------------------------------------------ priors

@dataclass(frozen=True)
class Circle:
    """Uniform distribution on a circle in the plane."""

    radius: float = 2.0
    n_oracle_atoms: int = 2048
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.n_oracle_atoms < 64:
            raise ValueError("n_oracle_atoms must be >= 64")

    dim = 2

    def sample(self, n, rng):
        t = rng.uniform(0.0, 2.0 * math.pi, size=n)
        return np.asarray(self.center) + self.radius * np.column_stack([np.cos(t), np.sin(t)])

    def oracle_measure(self) -> MixingMeasure:
        t = 2.0 * math.pi * np.arange(self.n_oracle_atoms) / self.n_oracle_atoms
        atoms = np.asarray(self.center) + self.radius * np.column_stack([np.cos(t), np.sin(t)])
        return MixingMeasure(atoms, np.full(self.n_oracle_atoms, 1.0 / self.n_oracle_atoms))


@dataclass(frozen=True, eq=False)
class Discrete:
    measure: MixingMeasure

    @property
    def dim(self):
        return self.measure.dim

    def sample(self, n, rng):
        idx = rng.choice(self.measure.n_atoms, size=n, p=self.measure.weights)
        return self.measure.atoms[idx]

    def oracle_measure(self) -> MixingMeasure:
        return self.measure


@dataclass(frozen=True, eq=False)
class PointMass:
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(-1))

    @property
    def dim(self):
        return self.mu.size

    def sample(self, n, rng):
        return np.tile(self.mu, (n, 1))

    def oracle_measure(self) -> MixingMeasure:
        return MixingMeasure.point_mass(self.mu)


PriorSpec = Circle | Discrete | PointMass


@dataclass(frozen=True)
class NoiseSpec:
    """Per-observation covariances: independent uniform diagonal variances in
    ``diag_variance_range``, or a fixed list cycled over the rows."""

    diag_variance_range: tuple | None = (0.5, 0.75)
    fixed: tuple | None = None

    def __post_init__(self):
        if self.fixed is None:
            if self.diag_variance_range is None:
                raise ValueError("give diag_variance_range or fixed covariances")
            low, high = self.diag_variance_range
            if not 0 < low <= high:
                raise ValueError("need 0 < low <= high")

    def covariances(self, n, p, rng) -> list[CovarianceSpec]:
        if self.fixed is not None:
            covs = [as_covariance(c, p) for c in self.fixed]
            return [covs[i % len(covs)] for i in range(n)]
        low, high = self.diag_variance_range
        V = rng.uniform(low, high, size=(n, p))
        return [Diagonal(v) for v in V]


def generate(prior, noise: NoiseSpec, n: int, seed: int):
    """Draw ``theta_i ~ prior`` and ``X_i = theta_i + Sigma_i^{1/2} Z_i``.

    Returns ``(dataset, true_means)``; fully determined by ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = prior.dim
    theta = prior.sample(n, keyed_rng(seed, _THETA))
    covs = noise.covariances(n, p, keyed_rng(seed, _VARIANCE))
    Z = keyed_rng(seed, _NOISE).standard_normal((n, p))
    X = np.vstack([theta[i] + covs[i].sqrt_apply(Z[i]) for i in range(n)])
    return Dataset.from_arrays(X, covs), theta


def oracle_posterior_means(data: Dataset, prior, policy: RegularizationPolicy | None = None) -> np.ndarray:
    """Bayes posterior means under the true prior (circle discretized)."""
    return posterior_means(data, prior.oracle_measure(), policy)[0]


# ------------------------------------------------------------------ experiments

@dataclass
class ExperimentConfig:
    design: str = "circle"
    n: int = 1000
    seed: int = 0
    p: int = 2
    radius: float = 2.0
    n_oracle_atoms: int = 2048
    noise_low: float = 0.5
    noise_high: float = 0.75
    region: str = "auto"
    delta: float | str = 0.1
    solver: str = "proj_newton"
    tol: float = 1e-6
    max_iters: int = 10_000
    rho: float | None = None
    regularize_oracle: bool = False
    n_jobs: int = 1

    def prior(self):
        if self.design == "circle":
            return Circle(self.radius, self.n_oracle_atoms)
        if self.design == "pointmass":
            return PointMass(np.zeros(self.p))
        if self.design == "discrete":
            # three atoms 10 sqrt(k_upper) apart
            s = 10.0 * math.sqrt(self.noise_high)
            atoms = np.zeros((3, self.p))
            atoms[1, 0] = s
            atoms[2, 1 % self.p] += s if self.p > 1 else 2 * s
            return Discrete(MixingMeasure(atoms, np.full(3, 1.0 / 3.0)))
        raise ValueError(f"unknown design {self.design!r}")

    def noise(self):
        return NoiseSpec((self.noise_low, self.noise_high))

    def estimator(self):
        return NPMLE(region=self.region, delta=self.delta, solver=self.solver, tol=self.tol,
                     max_iters=self.max_iters, rho=self.rho, n_jobs=self.n_jobs)


@dataclass(eq=False)
class ExperimentResult:
    report: dict
    data: Dataset
    truth: np.ndarray
    eb_means: np.ndarray
    oracle_means: np.ndarray
    measure: MixingMeasure
    extras: dict = field(default_factory=dict)


def simulate_once(config: ExperimentConfig) -> ExperimentResult:
    """Generate, fit, denoise and score one replication."""
    start = time.perf_counter()
    prior = config.prior()
    data, theta = generate(prior, config.noise(), config.n, config.seed)
    est = config.estimator().fit(data)
    eb = est.transform(data)
    policy = est._policy() if config.regularize_oracle else None
    oracle = oracle_posterior_means(data, prior, policy)
    cert = est.certificate_
    report = {
        "config": asdict(config),
        "seed": config.seed,
        "n": data.n,
        "p": data.dim,
        "mse_raw": regret(data.X, theta),
        "mse_eb": regret(eb, theta),
        "mse_oracle": regret(oracle, theta),
        "regret": regret(eb, oracle),
        "loglik": cert.loglik,
        "dual_gap": cert.dual_gap,
        "atoms_kept": est.measure_.n_atoms,
        "wall_ms": 1e3 * (time.perf_counter() - start),
    }
    return ExperimentResult(report, data, theta, eb, oracle, est.measure_, {"estimator": est})


def run_regret_experiment(config: ExperimentConfig) -> dict:
    """JSON-ready report of one replication."""
    return simulate_once(config).report


_METRICS = ("mse_raw", "mse_eb", "mse_oracle", "regret", "loglik", "dual_gap", "atoms_kept", "wall_ms")


def aggregate(reports: list[dict]) -> dict:
    """Medians, means and standard errors of each metric over replications."""
    out = {"reps": len(reports), "median": {}, "mean": {}, "std_error": {}}
    for key in _METRICS:
        v = np.array([r[key] for r in reports], dtype=float)
        out["median"][key] = float(np.median(v))
        out["mean"][key] = float(v.mean())
        out["std_error"][key] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    out["reports"] = reports
    return out


def run_w2_trend(prior: PointMass, n_list, seeds, *, noise: NoiseSpec | None = None, region: str = "auto",
                 delta: float = 0.1, solver: str = "proj_newton", tol: float = 1e-6) -> dict:
    """W2 between the fitted measure and the point mass, per ``n`` and seed.

    Reports per-``n`` medians and the least-squares slope of log median
    against log ``n``.
    """
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing")
    noise = noise or NoiseSpec()
    values, inside = {}, True
    for n in n_list:
        row = []
        for s in seeds:
            data, _ = generate(prior, noise, n, s)
            est = NPMLE(region=region, delta=delta, solver=solver, tol=tol).fit(data)
            row.append(w2_to_point_mass(est.measure_, prior.mu))
            if region == "ball":
                inside &= bool(np.all(est.region_.contains(est.measure_.atoms, tol=1e-9)))
        values[n] = row
    medians = [float(np.median(values[n])) for n in n_list]
    slope = float(np.polyfit(np.log(n_list), np.log(medians), 1)[0]) if len(n_list) > 1 else float("nan")
    report = {
        "mu": prior.mu.tolist(),
        "n_list": n_list,
        "seeds": [int(s) for s in seeds],
        "w2": {str(n): values[n] for n in n_list},
        "medians": medians,
        "slope": slope,
        "region": region,
        "delta": delta,
    }
    if region == "ball":
        report["support_in_ball"] = inside
    return report

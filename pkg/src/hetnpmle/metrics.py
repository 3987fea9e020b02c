"""Evaluation metrics: Hellinger, 2-Wasserstein, regret, likelihood gaps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .exceptions import DimensionMismatch, LengthMismatch, SizeLimit
from .kernels import kernel_matrix, log_kernel_shared
from .model import CovarianceSpec, Dataset, MixingMeasure

DEFAULT_OT_CAP = 10_000_000
QUADRATURE_NODES = 4096


@dataclass(frozen=True)
class HellingerEstimate:
    value: float
    std_error: float
    method: str
    samples: int


@dataclass(frozen=True, eq=False)
class TransportPlan:
    cost: float
    #: rows of (source index, target index, mass)
    flows: list

    @property
    def distance(self) -> float:
        return math.sqrt(max(self.cost, 0.0))


# ------------------------------------------------------------------ Hellinger

def _log_mix_many(points, cov: CovarianceSpec, G: MixingMeasure) -> np.ndarray:
    """``log f_{G, cov}`` at each row of ``points``."""
    with np.errstate(divide="ignore"):
        return logsumexp(log_kernel_shared(points, G.atoms, cov) + np.log(G.weights)[None, :], axis=1)


def _group_covariances(data: Dataset):
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(data.covariances):
        groups.setdefault(c.key(), []).append(i)
    return [(data.covariances[idx[0]], len(idx)) for idx in groups.values()]


def _affinity_mc(G, H, cov, n_samples, rng):
    """MC estimate of the Bhattacharyya affinity with proposal ``(f + g) / 2``."""
    p = G.dim
    coin = rng.random(n_samples) < 0.5
    pts = np.empty((n_samples, p))
    for src, mask in ((G, coin), (H, ~coin)):
        k = int(mask.sum())
        if k:
            idx = rng.choice(src.n_atoms, size=k, p=src.weights)
            pts[mask] = src.atoms[idx] + cov.sqrt_apply(rng.standard_normal((k, p)))
    lf = _log_mix_many(pts, cov, G)
    lg = _log_mix_many(pts, cov, H)
    # sqrt(fg) / ((f + g) / 2), bounded by one
    ratio = np.exp(0.5 * (lf + lg) - np.logaddexp(lf, lg) + math.log(2.0))
    return float(ratio.mean()), float(ratio.var(ddof=1)) if n_samples > 1 else 0.0


def _affinity_quadrature(G, H, cov, k_upper, nodes=QUADRATURE_NODES):
    lo = min(G.atoms.min(), H.atoms.min()) - 6.0 * math.sqrt(k_upper)
    hi = max(G.atoms.max(), H.atoms.max()) + 6.0 * math.sqrt(k_upper)
    grid = np.linspace(lo, hi, nodes)[:, None]
    lf = _log_mix_many(grid, cov, G)
    lg = _log_mix_many(grid, cov, H)
    return float(np.trapezoid(np.exp(0.5 * (lf + lg)), grid[:, 0]))


def avg_hellinger_sq(G: MixingMeasure, H: MixingMeasure, data: Dataset, n_samples: int = 100_000,
                     seed: int = 0, method: str = "monte_carlo") -> HellingerEstimate:
    """Average over observations of the squared Hellinger distance between
    the marginals ``f_{G, Sigma_i}`` and ``f_{H, Sigma_i}``.

    Work is shared between rows with identical covariances. ``method`` is
    ``"monte_carlo"`` (any dimension) or ``"quadrature"`` (``p = 1``).
    """
    if G.dim != H.dim or G.dim != data.dim:
        raise DimensionMismatch("measures and data must share one dimension")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = data.n
    groups = _group_covariances(data)
    if method == "quadrature":
        if data.dim != 1:
            raise ValueError("quadrature is only available for p = 1")
        total = sum(c * _affinity_quadrature(G, H, cov, data.k_upper) for cov, c in groups)
        value = min(1.0, max(0.0, 1.0 - total / n))
        return HellingerEstimate(value, 0.0, "quadrature", QUADRATURE_NODES)
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    mean_aff, var_sum = 0.0, 0.0
    for g_idx, (cov, c) in enumerate(groups):
        rng = np.random.default_rng([seed, g_idx])
        a, v = _affinity_mc(G, H, cov, n_samples, rng)
        mean_aff += c * a / n
        var_sum += (c / n) ** 2 * v / n_samples
    value = min(1.0, max(0.0, 1.0 - mean_aff))
    return HellingerEstimate(value, math.sqrt(var_sum), "monte_carlo", n_samples)


# ------------------------------------------------------------------ Wasserstein

def wasserstein2(G: MixingMeasure, H: MixingMeasure, cap: int = DEFAULT_OT_CAP) -> TransportPlan:
    """Exact squared 2-Wasserstein distance between two discrete measures."""
    if G.dim != H.dim:
        raise DimensionMismatch(f"measures have dimensions {G.dim} and {H.dim}")
    m, k = G.n_atoms, H.n_atoms
    if m * k > cap:
        raise SizeLimit(f"cost matrix would have {m * k} entries, cap is {cap}")
    diff = G.atoms[:, None, :] - H.atoms[None, :, :]
    C = np.einsum("ijk,ijk->ij", diff, diff)
    if m == 1 or k == 1:
        # the only coupling is the product measure
        P = np.outer(G.weights, H.weights)
    else:
        rows = sparse.kron(sparse.eye(m), np.ones((1, k)))
        cols = sparse.kron(np.ones((1, m)), sparse.eye(k))
        A = sparse.vstack([rows, cols]).tocsr()
        b = np.concatenate([G.weights, H.weights])
        # one marginal constraint is redundant; drop it for a full-rank system
        res = linprog(C.ravel(), A_eq=A[:-1], b_eq=b[:-1], bounds=(0, None), method="highs-ds")
        if res.status != 0:
            raise RuntimeError(f"transport LP failed: {res.message}")
        P = np.clip(res.x.reshape(m, k), 0.0, None)
    cost = float(np.sum(P * C))
    nz = np.argwhere(P > 0)
    flows = [(int(i), int(j), float(P[i, j])) for i, j in nz]
    return TransportPlan(cost, flows)


def w2_to_point_mass(G: MixingMeasure, mu) -> float:
    """``W_2(G, delta_mu)``; the coupling to a point mass is unique."""
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if mu.size != G.dim:
        raise DimensionMismatch(f"point has dimension {mu.size}, measure {G.dim}")
    d = G.atoms - mu
    return math.sqrt(float(G.weights @ np.einsum("ij,ij->i", d, d)))


# ------------------------------------------------------------------ regret

def regret(estimates, oracle) -> float:
    """Mean squared Euclidean distance between paired vectors."""
    a = np.asarray(estimates, dtype=float)
    b = np.asarray(oracle, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"shapes {a.shape} and {b.shape} differ")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


mse = regret


def loglik_gap(data: Dataset, G: MixingMeasure, H: MixingMeasure) -> float:
    """Mean log-likelihood of ``G`` minus that of ``H`` on ``data``."""
    out = []
    for M in (G, H):
        K = kernel_matrix(data, M.atoms)
        with np.errstate(divide="ignore"):
            out.append(float(np.mean(logsumexp(K.entries + np.log(M.weights)[None, :], axis=1))))
    return out[0] - out[1]

"""Gaussian log-densities, the log-kernel matrix, and mixture evaluations.

Everything is kept in log space; densities are only exponentiated after a
per-row shift so that the largest term of each row is exactly one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .exceptions import AllWeightsOnUnderflowedAtoms, DimensionMismatch
from .model import LOG_2PI, CovarianceSpec, Dataset, MixingMeasure, as_covariance

# max number of float64 temporaries per chunk when broadcasting (n, m, p)
_CHUNK_ELEMS = 2_000_000
# kernel and weight values below this are treated as exact zeros
TINY = 1e-300


@dataclass(frozen=True, eq=False)
class LogKernelMatrix:
    """``entries[i, j] = log phi_{Sigma_i}(X_i - a_j)`` with cached row maxima."""

    entries: np.ndarray
    row_max: np.ndarray

    @classmethod
    def from_entries(cls, entries) -> "LogKernelMatrix":
        entries = np.asarray(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[1] == 0:
            raise DimensionMismatch(f"kernel entries must be (n, m>=1), got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise FloatingPointError("kernel matrix has non-finite entries")
        return cls(entries, entries.max(axis=1))

    @property
    def shape(self):
        return self.entries.shape

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def m(self) -> int:
        return self.entries.shape[1]

    @cached_property
    def scaled(self) -> np.ndarray:
        """``exp(entries - row_max)``; every row has maximum exactly one.

        Values below ``TINY`` are flushed to zero: subnormal operands slow
        every later matrix product by orders of magnitude.
        """
        out = np.exp(self.entries - self.row_max[:, None])
        out[out < TINY] = 0.0
        return out

    def columns(self, idx) -> "LogKernelMatrix":
        sub = self.entries[:, idx]
        return LogKernelMatrix(sub, sub.max(axis=1))


@dataclass(frozen=True)
class MixtureEval:
    log_density: float
    density: float
    gradient: np.ndarray
    #: gradient / density, evaluated without forming either
    score: np.ndarray


def log_gauss(x, mean, sigma) -> float:
    """Log density of ``N(mean, sigma)`` at ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    mean = np.asarray(mean, dtype=float).reshape(-1)
    if x.size != mean.size:
        raise DimensionMismatch(f"x has dimension {x.size}, mean {mean.size}")
    sigma = as_covariance(sigma, x.size)
    quad = float(sigma.mahalanobis_sq(x - mean))
    return -0.5 * (x.size * LOG_2PI + sigma.logdet + quad)


def log_gauss_rows(x, atoms, sigma: CovarianceSpec) -> np.ndarray:
    """``log phi_sigma(x - a_j)`` for every row ``a_j`` of ``atoms``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    if atoms.shape[1] != x.size:
        raise DimensionMismatch(f"atoms have dimension {atoms.shape[1]}, x has {x.size}")
    quad = sigma.mahalanobis_sq(x - atoms)
    return -0.5 * (x.size * LOG_2PI + sigma.logdet + quad)


def log_kernel_shared(points, atoms, sigma: CovarianceSpec) -> np.ndarray:
    """``log phi_sigma(x_k - a_j)`` for many points sharing one covariance."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    A = np.atleast_2d(np.asarray(atoms, dtype=float))
    p = A.shape[1]
    out = np.empty((P.shape[0], A.shape[0]))
    const = p * LOG_2PI + sigma.logdet
    for sl in _row_chunks(P.shape[0], A.shape[0], p):
        out[sl] = -0.5 * (sigma.mahalanobis_sq(P[sl, None, :] - A[None, :, :]) + const)
    return out


def _diag_block(X, V, logdets, A):
    p = X.shape[1]
    diff = X[:, None, :] - A[None, :, :]
    quad = np.einsum("imk,imk->im", diff / V[:, None, :], diff)
    return -0.5 * (quad + (p * LOG_2PI + logdets)[:, None])


def _row_chunks(n, m, p):
    step = max(1, _CHUNK_ELEMS // max(1, m * p))
    return [slice(s, min(n, s + step)) for s in range(0, n, step)]


def kernel_matrix(data: Dataset, atoms, n_jobs: int = 1) -> LogKernelMatrix:
    """Log-kernel matrix of ``data`` against the rows of ``atoms``."""
    A = np.atleast_2d(np.asarray(atoms, dtype=float))
    if A.shape[0] < 1:
        raise ValueError("need at least one atom")
    if A.shape[1] != data.dim:
        raise DimensionMismatch(f"atoms have dimension {A.shape[1]}, data {data.dim}")
    n, m, p = data.n, A.shape[0], data.dim
    out = np.empty((n, m))

    if data.all_diagonal:
        X, V, ld = data.X, data.variances, data.logdets

        def work(sl):
            out[sl] = _diag_block(X[sl], V[sl], ld[sl], A)

        tasks = _row_chunks(n, m, p)
    else:
        groups: dict[tuple, list[int]] = {}
        for i, c in enumerate(data.covariances):
            groups.setdefault(c.key(), []).append(i)

        def work(rows):
            cov = data.covariances[rows[0]]
            rows = np.asarray(rows)
            for sl in _row_chunks(len(rows), m, p):
                r = rows[sl]
                diff = data.X[r][:, None, :] - A[None, :, :]
                quad = cov.mahalanobis_sq(diff)
                out[r] = -0.5 * (quad + p * LOG_2PI + cov.logdet)

        tasks = list(groups.values())

    if n_jobs and n_jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            list(ex.map(work, tasks))
    else:
        for t in tasks:
            work(t)
    return LogKernelMatrix(out, out.max(axis=1))


def row_log_likelihoods(K: LogKernelMatrix, w) -> np.ndarray:
    """``log f_i = log sum_j w_j exp(K_ij)`` for every row."""
    w = np.asarray(w, dtype=float)
    if w.shape != (K.m,):
        raise DimensionMismatch(f"weights have shape {w.shape}, kernel has {K.m} columns")
    s = K.scaled @ w
    bad = np.flatnonzero(~(s > 0))
    if bad.size:
        raise AllWeightsOnUnderflowedAtoms(bad)
    return np.log(s) + K.row_max


def mixture_loglik(K: LogKernelMatrix, w) -> float:
    """Mean log-likelihood ``(1/n) sum_i log sum_j w_j exp(K_ij)``."""
    return float(np.mean(row_log_likelihoods(K, w)))


def mixture_eval(x, sigma, G: MixingMeasure) -> MixtureEval:
    """Density and gradient of ``f_{G, sigma}`` at ``x``, sharing one pass."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != G.dim:
        raise DimensionMismatch(f"x has dimension {x.size}, measure {G.dim}")
    sigma = as_covariance(sigma, x.size)
    with np.errstate(divide="ignore"):
        lt = np.log(G.weights) + log_gauss_rows(x, G.atoms, sigma)
    logf = float(logsumexp(lt))
    resp = np.exp(lt - logf)
    score = sigma.solve(resp @ G.atoms - x)
    dens = float(np.exp(logf))
    return MixtureEval(logf, dens, dens * score, score)

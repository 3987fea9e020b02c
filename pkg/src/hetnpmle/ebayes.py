"""Posterior means under a discrete prior: direct mixing and Tweedie's formula."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import AllResponsibilitiesUnderflow, DimensionMismatch, ZeroDensity
from .kernels import kernel_matrix, log_gauss_rows, mixture_eval
from .model import Dataset, MixingMeasure, as_covariance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegularizationPolicy:
    """Floor ``rho / sqrt(det Sigma)`` on the marginal density in Tweedie's formula."""

    rho: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @classmethod
    def default(cls, n: int, p: int) -> "RegularizationPolicy":
        return cls((2.0 * math.pi) ** (-p / 2.0) / n)

    def log_floor(self, logdet) -> np.ndarray:
        return math.log(self.rho) - 0.5 * np.asarray(logdet)


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    responsibilities: np.ndarray
    mean: np.ndarray
    used_regularization: bool = False
    #: set when responsibilities underflowed and the nearest atom was used
    fallback: bool = False


def _log_terms(x, sigma, G):
    with np.errstate(divide="ignore"):
        return np.log(G.weights) + log_gauss_rows(x, G.atoms, sigma)


def posterior_mean_direct(x, sigma, G: MixingMeasure) -> PosteriorSummary:
    """Posterior mean ``sum_j r_j a_j`` with ``r_j`` proportional to ``w_j phi(x - a_j)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != G.dim:
        raise DimensionMismatch(f"x has dimension {x.size}, prior {G.dim}")
    sigma = as_covariance(sigma, x.size)
    lt = _log_terms(x, sigma, G)
    top = lt.max()
    if not np.isfinite(top):
        raise AllResponsibilitiesUnderflow("every prior atom has zero posterior weight")
    r = np.exp(lt - top)
    r /= r.sum()
    return PosteriorSummary(r, r @ G.atoms)


def posterior_mean_tweedie(x, sigma, G: MixingMeasure, policy: RegularizationPolicy | None = None) -> PosteriorSummary:
    """``x + Sigma grad f / f`` with an optional floor on the denominator."""
    x = np.asarray(x, dtype=float).reshape(-1)
    sigma = as_covariance(sigma, x.size)
    ev = mixture_eval(x, sigma, G)
    lt = _log_terms(x, sigma, G)
    r = np.exp(lt - ev.log_density)
    if policy is None:
        if not ev.density > 0:
            raise ZeroDensity(f"marginal density underflows at x={x}")
        mean = x + sigma.apply(ev.gradient / ev.density)
        return PosteriorSummary(r, mean)
    log_floor = float(policy.log_floor(sigma.logdet))
    if ev.log_density >= log_floor:
        if ev.density > 0:
            return PosteriorSummary(r, x + sigma.apply(ev.gradient / ev.density))
        return PosteriorSummary(r, x + sigma.apply(ev.score))
    # grad f / floor = (f / floor) * score, kept in log space
    scale = math.exp(ev.log_density - log_floor)
    return PosteriorSummary(r, x + sigma.apply(scale * ev.score), used_regularization=True)


def posterior_means(data: Dataset, G: MixingMeasure, policy: RegularizationPolicy | None = None,
                    n_jobs: int = 1):
    """Vectorized posterior means for every row of ``data``.

    Returns ``(means, responsibilities, used_regularization, fallback)``.
    Rows where the density floor binds use the regularized Tweedie rule,
    which for a discrete prior is ``x + c (direct - x)`` with
    ``c = f / floor < 1``.
    """
    if G.dim != data.dim:
        raise DimensionMismatch(f"prior has dimension {G.dim}, data {data.dim}")
    K = kernel_matrix(data, G.atoms, n_jobs=n_jobs)
    with np.errstate(divide="ignore"):
        lt = K.entries + np.log(G.weights)[None, :]
    top = lt.max(axis=1)
    fallback = ~np.isfinite(top)
    if fallback.any():
        logger.warning("responsibilities underflow for %d rows; using nearest atoms", int(fallback.sum()))
        top = np.where(fallback, 0.0, top)
    R = np.exp(lt - top[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        logf = np.log(R.sum(axis=1)) + top
        R /= R.sum(axis=1, keepdims=True)
    for i in np.flatnonzero(fallback):
        cov = data.covariances[i]
        diff = data.X[i] - G.atoms
        # rescale so the squared distances cannot overflow; the ordering is unchanged
        j = int(np.argmin(cov.mahalanobis_sq(diff / np.abs(diff).max())))
        R[i] = 0.0
        R[i, j] = 1.0
    means = R @ G.atoms
    used = np.zeros(data.n, dtype=bool)
    if policy is not None:
        log_floor = policy.log_floor(data.logdets)
        used = (logf < log_floor) & ~fallback
        if used.any():
            c = np.exp(logf[used] - log_floor[used])
            X = data.X[used]
            means[used] = X + c[:, None] * (means[used] - X)
    return means, R, used, fallback


def denoise(data: Dataset, G: MixingMeasure, policy: RegularizationPolicy | None = None,
            n_jobs: int = 1) -> list[PosteriorSummary]:
    """Per-observation posterior summaries, each using its own covariance."""
    means, R, used, fb = posterior_means(data, G, policy, n_jobs=n_jobs)
    return [PosteriorSummary(R[i], means[i], bool(used[i]), bool(fb[i])) for i in range(data.n)]


def log_marginal_density(data: Dataset, G: MixingMeasure) -> np.ndarray:
    """``log f_{G, Sigma_i}(X_i)`` for every row."""
    K = kernel_matrix(data, G.atoms)
    with np.errstate(divide="ignore"):
        return logsumexp(K.entries + np.log(G.weights)[None, :], axis=1)


"""Scikit-learn style estimator wrapping the full NPMLE pipeline."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted

from .ebayes import RegularizationPolicy, posterior_means
from .kernels import kernel_matrix, row_log_likelihoods
from .model import Dataset, MixingMeasure
from .solver import SolverConfig, solve_weights
from .support import DEFAULT_GRID_CAP, build_grid, default_delta, support_region

logger = logging.getLogger(__name__)


def check_dataset(X, sigma=1.0) -> Dataset:
    """Validate ``X`` (array or :class:`Dataset`) and its covariances."""
    if isinstance(X, Dataset):
        return X
    X = check_array(X, ensure_2d=False, dtype=np.float64)
    return Dataset.from_arrays(X, sigma)


class NPMLE(TransformerMixin, BaseEstimator):
    """Grid-based NPMLE of a prior from heteroscedastic Gaussian observations.

    ``fit(X, sigma)`` estimates a discrete prior; ``transform`` /
    ``predict`` return empirical-Bayes posterior means; ``score`` returns the
    mean log marginal likelihood. ``sigma`` is a scalar, per-row variances
    ``(n,)``, per-row diagonals ``(n, p)`` or full matrices ``(n, p, p)``.

    Parameters
    ----------
    region : {"auto", "hull", "bbox", "ball"}
        Support bound on which the grid is laid.
    delta : float or "auto"
        Grid resolution. ``"auto"`` targets a likelihood gap of order
        ``(log n)^(p+1) / n`` within the atom budget.
    solver : {"proj_newton", "em", "frank_wolfe"}
    tol : float
        Dual-gap tolerance.
    rho : float or None
        Density floor of the regularized Tweedie rule; ``None`` uses
        ``(2 pi)^(-p/2) / n`` with ``n`` the size of the fitted data.
    """

    def __init__(self, region="auto", delta="auto", solver="proj_newton", tol=1e-6, max_iters=10_000,
                 prune_tol=1e-10, grid_cap=DEFAULT_GRID_CAP, rho=None, extra_atoms=None, n_jobs=1):
        self.region = region
        self.delta = delta
        self.solver = solver
        self.tol = tol
        self.max_iters = max_iters
        self.prune_tol = prune_tol
        self.grid_cap = grid_cap
        self.rho = rho
        self.extra_atoms = extra_atoms
        self.n_jobs = n_jobs

    def _config(self):
        return SolverConfig(algorithm=self.solver, max_iters=self.max_iters, dual_gap_tol=self.tol,
                            prune_weight_tol=self.prune_tol)

    def fit(self, X, sigma=1.0, y=None):
        data = check_dataset(X, sigma)
        config = self._config()
        region = support_region(data, self.region)
        if self.delta == "auto":
            delta, coarsened = default_delta(data, region, cap=self.grid_cap)
        else:
            delta, coarsened = float(self.delta), False
        grid = build_grid(region, delta, cap=self.grid_cap, extra_atoms=self.extra_atoms)
        K = kernel_matrix(data, grid.atoms, n_jobs=self.n_jobs)
        w, cert = solve_weights(K, config)
        if not cert.converged:
            warnings.warn(f"solver stopped with dual gap {cert.dual_gap:.3g}", ConvergenceWarning)
        keep = w > 0
        self.measure_ = MixingMeasure(grid.atoms[keep], w[keep]).compact(0.0, region.diameter)
        self.weights_ = w
        self.grid_ = grid
        self.region_ = region
        self.delta_ = delta
        self.delta_coarsened_ = coarsened
        self.certificate_ = cert
        self.n_fit_ = data.n
        self.n_features_in_ = data.dim
        self.k_lower_ = data.k_lower
        self.k_upper_ = data.k_upper
        return self

    @property
    def atoms_(self):
        return self.measure_.atoms

    @property
    def prior_weights_(self):
        return self.measure_.weights

    def _policy(self):
        if self.rho is None:
            return RegularizationPolicy.default(self.n_fit_, self.n_features_in_)
        return RegularizationPolicy(float(self.rho))

    def posterior(self, X, sigma=1.0):
        """``(means, responsibilities, used_regularization, fallback)``."""
        check_is_fitted(self, "measure_")
        data = check_dataset(X, sigma)
        return posterior_means(data, self.measure_, self._policy(), n_jobs=self.n_jobs)

    def transform(self, X, sigma=1.0):
        return self.posterior(X, sigma)[0]

    predict = transform

    def fit_transform(self, X, sigma=1.0, y=None):
        return self.fit(X, sigma).transform(X, sigma)

    def score_samples(self, X, sigma=1.0):
        """Log marginal density of each observation under the fitted prior."""
        check_is_fitted(self, "measure_")
        data = check_dataset(X, sigma)
        K = kernel_matrix(data, self.measure_.atoms, n_jobs=self.n_jobs)
        return row_log_likelihoods(K, self.measure_.weights)

    def score(self, X, sigma=1.0, y=None):
        return float(np.mean(self.score_samples(X, sigma)))

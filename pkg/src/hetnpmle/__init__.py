"""Nonparametric maximum likelihood for heteroscedastic Gaussian deconvolution
and empirical-Bayes denoising."""

from .ebayes import RegularizationPolicy, denoise, posterior_mean_direct, posterior_mean_tweedie, posterior_means
from .estimator import NPMLE, check_dataset
from .exceptions import (
    DeltaOutOfRange,
    DimensionMismatch,
    EmptyDataset,
    GridTooLarge,
    NonConvergence,
    NotPositiveDefinite,
    NPMLEError,
)
from .kernels import kernel_matrix, mixture_eval, mixture_loglik
from .metrics import avg_hellinger_sq, regret, w2_to_point_mass, wasserstein2
from .model import (
    AffineMap,
    Dataset,
    Diagonal,
    Full,
    Isotropic,
    MixingMeasure,
    Observation,
    pushforward,
    transform_dataset,
)
from .solver import SolverConfig, certify, dual_density, dual_values, solve_weights
from .support import BBox, Ball, Hull, build_grid, default_delta, discretization_bound, support_region

__all__ = [
    "AffineMap", "BBox", "Ball", "Dataset", "DeltaOutOfRange", "Diagonal", "DimensionMismatch", "EmptyDataset",
    "Full", "GridTooLarge", "Hull", "Isotropic", "MixingMeasure", "NPMLE", "NPMLEError", "NonConvergence",
    "NotPositiveDefinite", "Observation", "RegularizationPolicy", "SolverConfig", "avg_hellinger_sq",
    "build_grid", "certify", "check_dataset", "default_delta", "denoise", "discretization_bound", "dual_density",
    "dual_values", "kernel_matrix", "mixture_eval", "mixture_loglik", "posterior_mean_direct",
    "posterior_mean_tweedie", "posterior_means", "pushforward", "regret", "solve_weights", "support_region",
    "transform_dataset", "w2_to_point_mass", "wasserstein2",
]

"""Domain types: covariances, observations, datasets, mixing measures, affine maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DimensionMismatch, EmptyDataset, NotPositiveDefinite

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

#: absolute tolerance on the total mass of a mixing measure
SIMPLEX_TOL = 1e-12
#: relative atom merge tolerance (times the region diameter)
MERGE_RTOL = 1e-9


class CovarianceSpec:
    """Common interface of the three covariance tiers.

    Subclasses store whatever is cheapest for their structure and expose the
    handful of linear-algebra primitives the rest of the package needs.
    """

    kind: str = ""
    dim: int

    @property
    def matrix(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def logdet(self) -> float:
        raise NotImplementedError

    @property
    def eig_bounds(self) -> tuple[float, float]:
        raise NotImplementedError

    def mahalanobis_sq(self, diff: np.ndarray) -> np.ndarray:
        """``d' S^{-1} d`` for every row ``d`` of ``diff`` (shape ``(..., p)``)."""
        raise NotImplementedError

    def solve(self, v: np.ndarray) -> np.ndarray:
        """``S^{-1} v`` applied row-wise."""
        raise NotImplementedError

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``S v`` applied row-wise."""
        raise NotImplementedError

    def sqrt_apply(self, z: np.ndarray) -> np.ndarray:
        """Map standard normal rows ``z`` to rows with covariance ``S``."""
        raise NotImplementedError

    def rotated(self, rotation: np.ndarray) -> "CovarianceSpec":
        """Covariance of ``U x`` when ``x`` has this covariance."""
        raise NotImplementedError

    def key(self) -> tuple:
        """Hashable identity used to share work between equal covariances."""
        raise NotImplementedError

    def _check_dim(self, v: np.ndarray) -> None:
        if v.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected trailing dimension {self.dim}, got {v.shape[-1]}")


class Isotropic(CovarianceSpec):
    kind = "isotropic"

    def __init__(self, variance: float, dim: int = 1):
        variance = float(variance)
        if not np.isfinite(variance) or variance <= 0:
            raise NotPositiveDefinite(f"isotropic variance must be positive, got {variance}")
        if int(dim) < 1:
            raise DimensionMismatch("dimension must be >= 1")
        self.variance = variance
        self.dim = int(dim)

    def __repr__(self):
        return f"Isotropic(variance={self.variance!r}, dim={self.dim})"

    @property
    def variances(self) -> np.ndarray:
        return np.full(self.dim, self.variance)

    @property
    def matrix(self):
        return self.variance * np.eye(self.dim)

    @property
    def logdet(self):
        return self.dim * np.log(self.variance)

    @property
    def eig_bounds(self):
        return self.variance, self.variance

    def mahalanobis_sq(self, diff):
        diff = np.asarray(diff, dtype=float)
        self._check_dim(diff)
        return np.einsum("...i,...i->...", diff, diff) / self.variance

    def solve(self, v):
        return np.asarray(v, dtype=float) / self.variance

    def apply(self, v):
        return np.asarray(v, dtype=float) * self.variance

    def sqrt_apply(self, z):
        return np.asarray(z, dtype=float) * np.sqrt(self.variance)

    def rotated(self, rotation):
        return self

    def key(self):
        return ("iso", self.dim, self.variance)


class Diagonal(CovarianceSpec):
    kind = "diagonal"

    def __init__(self, variances: Sequence[float]):
        v = np.array(variances, dtype=float).reshape(-1)
        if v.size == 0:
            raise DimensionMismatch("diagonal covariance needs at least one entry")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise NotPositiveDefinite(f"diagonal variances must be positive, got {v}")
        v.setflags(write=False)
        self.variances = v
        self.dim = v.size

    def __repr__(self):
        return f"Diagonal(variances={self.variances.tolist()!r})"

    @property
    def matrix(self):
        return np.diag(self.variances)

    @property
    def logdet(self):
        return float(np.sum(np.log(self.variances)))

    @property
    def eig_bounds(self):
        return float(self.variances.min()), float(self.variances.max())

    def mahalanobis_sq(self, diff):
        diff = np.asarray(diff, dtype=float)
        self._check_dim(diff)
        return np.einsum("...i,...i->...", diff / self.variances, diff)

    def solve(self, v):
        return np.asarray(v, dtype=float) / self.variances

    def apply(self, v):
        return np.asarray(v, dtype=float) * self.variances

    def sqrt_apply(self, z):
        return np.asarray(z, dtype=float) * np.sqrt(self.variances)

    def rotated(self, rotation):
        rotation = np.asarray(rotation, dtype=float)
        perm = _signed_permutation(rotation)
        if perm is not None:
            # U diag(v) U' stays diagonal: entry i picks up v[perm[i]]
            return Diagonal(self.variances[perm])
        return Full(rotation @ self.matrix @ rotation.T)

    def key(self):
        return ("diag", self.variances.tobytes())


class Full(CovarianceSpec):
    """Dense SPD covariance; the Cholesky factor is computed once and kept."""

    kind = "full"

    def __init__(self, matrix, *, sym_rtol: float = 1e-10):
        a = np.array(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"covariance must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NotPositiveDefinite("covariance has non-finite entries")
        scale = max(np.abs(a).max(), 1e-300)
        if np.abs(a - a.T).max() > sym_rtol * scale:
            raise NotPositiveDefinite("covariance is not symmetric")
        a = 0.5 * (a + a.T)
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(f"Cholesky factorization failed: {exc}") from None
        a.setflags(write=False)
        chol.setflags(write=False)
        self._matrix = a
        self.chol = chol
        self.dim = a.shape[0]

    @classmethod
    def from_lower(cls, values: Sequence[float], dim: int) -> "Full":
        """Build from the row-major lower triangle ``c11, c21, c22, c31, ...``."""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != dim * (dim + 1) // 2:
            raise DimensionMismatch(
                f"lower triangle of a {dim}x{dim} matrix has {dim * (dim + 1) // 2} entries, got {values.size}"
            )
        a = np.zeros((dim, dim))
        a[np.tril_indices(dim)] = values
        a = a + np.tril(a, -1).T
        return cls(a)

    def lower_triangle(self) -> np.ndarray:
        return self._matrix[np.tril_indices(self.dim)]

    def __repr__(self):
        return f"Full(matrix={self._matrix.tolist()!r})"

    @property
    def matrix(self):
        return self._matrix

    @property
    def logdet(self):
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    @cached_property
    def eig_bounds(self):
        ev = np.linalg.eigvalsh(self._matrix)
        return float(ev[0]), float(ev[-1])

    def _whiten(self, diff):
        from scipy.linalg import solve_triangular

        diff = np.asarray(diff, dtype=float)
        self._check_dim(diff)
        flat = diff.reshape(-1, self.dim)
        z = solve_triangular(self.chol, flat.T, lower=True, check_finite=False)
        return z.T.reshape(diff.shape)

    def mahalanobis_sq(self, diff):
        z = self._whiten(diff)
        return np.einsum("...i,...i->...", z, z)

    def solve(self, v):
        from scipy.linalg import cho_solve

        v = np.asarray(v, dtype=float)
        self._check_dim(v)
        flat = v.reshape(-1, self.dim)
        out = cho_solve((self.chol, True), flat.T, check_finite=False)
        return out.T.reshape(v.shape)

    def apply(self, v):
        return np.asarray(v, dtype=float) @ self._matrix.T

    def sqrt_apply(self, z):
        return np.asarray(z, dtype=float) @ self.chol.T

    def rotated(self, rotation):
        rotation = np.asarray(rotation, dtype=float)
        b = rotation @ self._matrix @ rotation.T
        return Full(0.5 * (b + b.T))

    def key(self):
        return ("full", self._matrix.tobytes())


def _signed_permutation(u: np.ndarray):
    """Return ``perm`` with ``|u[i, perm[i]]| == 1`` if ``u`` is a signed permutation."""
    a = np.abs(u)
    if not np.all((a == 0) | (a == 1)):
        return None
    if not (np.all(a.sum(axis=0) == 1) and np.all(a.sum(axis=1) == 1)):
        return None
    return np.argmax(a, axis=1)


def as_covariance(value, dim: int) -> CovarianceSpec:
    """Coerce a scalar, length-``dim`` vector, ``dim x dim`` matrix or spec."""
    if isinstance(value, CovarianceSpec):
        if value.dim != dim:
            raise DimensionMismatch(f"covariance has dimension {value.dim}, expected {dim}")
        return value
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return Isotropic(float(a), dim)
    if a.ndim == 1:
        if a.size != dim:
            raise DimensionMismatch(f"diagonal covariance has {a.size} entries, expected {dim}")
        return Diagonal(a)
    if a.ndim == 2:
        if a.shape != (dim, dim):
            raise DimensionMismatch(f"covariance has shape {a.shape}, expected {(dim, dim)}")
        return Full(a)
    raise DimensionMismatch(f"cannot interpret array of shape {a.shape} as a covariance")


@dataclass(frozen=True, eq=False)
class Observation:
    x: np.ndarray
    sigma: CovarianceSpec

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        if x.size == 0:
            raise DimensionMismatch("observation vector is empty")
        if not np.all(np.isfinite(x)):
            raise ValueError("observation contains non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "sigma", as_covariance(self.sigma, x.size))

    @property
    def dim(self) -> int:
        return self.x.size


class Dataset:
    """Validated collection of observations sharing one dimension.

    Construction performs all checks, so every ``Dataset`` instance is valid.
    Spectral bounds and stacked arrays are cached.
    """

    def __init__(self, observations: Iterable[Observation]):
        obs = tuple(observations)
        if not obs:
            raise EmptyDataset("dataset has no observations")
        for i, o in enumerate(obs):
            if not isinstance(o, Observation):
                raise TypeError(f"row {i}: expected Observation, got {type(o).__name__}")
        p = obs[0].dim
        for i, o in enumerate(obs):
            if o.dim != p or o.sigma.dim != p:
                raise DimensionMismatch(f"row {i}: dimension {o.dim} differs from {p}")
        self.observations = obs
        self.dim = p
        bounds = np.array([o.sigma.eig_bounds for o in obs])
        self.k_lower = float(bounds[:, 0].min())
        self.k_upper = float(bounds[:, 1].max())
        if not (0 < self.k_lower <= self.k_upper < np.inf):
            raise NotPositiveDefinite("covariance eigenvalues out of range")

    @classmethod
    def from_arrays(cls, X, sigma=1.0) -> "Dataset":
        """Build from an ``(n, p)`` array and a covariance description.

        ``sigma`` may be a scalar (shared isotropic), a length-``n`` vector
        (per-row isotropic), an ``(n, p)`` array (per-row diagonal), an
        ``(n, p, p)`` array (per-row full), or a sequence of
        :class:`CovarianceSpec`.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DimensionMismatch(f"X must be 2-D, got shape {X.shape}")
        n, p = X.shape
        if n == 0:
            raise EmptyDataset("dataset has no observations")
        covs = _covariances_from(sigma, n, p)
        return cls(Observation(x, s) for x, s in zip(X, covs))

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    def __repr__(self):
        return f"Dataset(n={len(self)}, dim={self.dim}, kind={self.covariance_kind!r})"

    @property
    def n(self) -> int:
        return len(self.observations)

    @cached_property
    def X(self) -> np.ndarray:
        out = np.stack([o.x for o in self.observations])
        out.setflags(write=False)
        return out

    @cached_property
    def covariances(self) -> tuple[CovarianceSpec, ...]:
        return tuple(o.sigma for o in self.observations)

    @cached_property
    def covariance_kind(self) -> str:
        kinds = {c.kind for c in self.covariances}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    @cached_property
    def all_diagonal(self) -> bool:
        return all(c.kind in ("isotropic", "diagonal") for c in self.covariances)

    @cached_property
    def variances(self) -> np.ndarray:
        """``(n, p)`` per-row variances; only defined when :attr:`all_diagonal`."""
        if not self.all_diagonal:
            raise TypeError("per-row variances only exist for diagonal covariances")
        return np.stack([c.variances for c in self.covariances])

    @cached_property
    def logdets(self) -> np.ndarray:
        return np.array([c.logdet for c in self.covariances])

    @cached_property
    def matrices(self) -> np.ndarray:
        return np.stack([c.matrix for c in self.covariances])


def _covariances_from(sigma, n, p):
    if isinstance(sigma, CovarianceSpec):
        return [as_covariance(sigma, p)] * n
    if isinstance(sigma, (list, tuple)) and sigma and isinstance(sigma[0], CovarianceSpec):
        if len(sigma) != n:
            raise DimensionMismatch(f"got {len(sigma)} covariances for {n} observations")
        return [as_covariance(s, p) for s in sigma]
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        shared = Isotropic(float(s), p)
        return [shared] * n
    if s.ndim == 1:
        if s.size != n:
            raise DimensionMismatch(f"per-row variances: got {s.size} values for {n} rows")
        return [Isotropic(v, p) for v in s]
    if s.ndim == 2:
        if s.shape != (n, p):
            raise DimensionMismatch(f"diagonal variances must have shape {(n, p)}, got {s.shape}")
        return [Diagonal(v) for v in s]
    if s.ndim == 3:
        if s.shape != (n, p, p):
            raise DimensionMismatch(f"full covariances must have shape {(n, p, p)}, got {s.shape}")
        return [Full(m) for m in s]
    raise DimensionMismatch(f"cannot interpret covariance array of shape {s.shape}")


def validate_dataset(raw) -> Dataset:
    """Return a validated :class:`Dataset`.

    Accepts an existing dataset (returned unchanged), an iterable of
    :class:`Observation`, or an ``(X, sigma)`` pair.
    """
    if isinstance(raw, Dataset):
        return raw
    if isinstance(raw, tuple) and len(raw) == 2 and not isinstance(raw[0], Observation):
        return Dataset.from_arrays(*raw)
    return Dataset(raw)


@dataclass(eq=False)
class MixingMeasure:
    """Discrete probability measure ``sum_j w_j delta_{a_j}``.

    Weights are renormalized on construction; ``renormalization`` keeps the
    deviation of the raw total mass from one.
    """

    atoms: np.ndarray
    weights: np.ndarray
    renormalization: float = field(default=0.0, init=False)

    def __post_init__(self):
        a = np.array(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[0] != w.size or w.size == 0:
            raise DimensionMismatch(f"atoms {a.shape} and weights {w.shape} are inconsistent")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
            raise ValueError("mixing measure has non-finite entries")
        if np.any(w < -SIMPLEX_TOL):
            raise ValueError("mixing weights must be nonnegative")
        w = np.clip(w, 0.0, None)
        total = w.sum()
        if total <= 0:
            raise ValueError("mixing weights sum to zero")
        self.renormalization = float(total - 1.0)
        if abs(self.renormalization) > SIMPLEX_TOL:
            logger.debug("renormalized mixing weights (total mass %.17g)", total)
        self.atoms = a
        self.weights = w / total

    @classmethod
    def point_mass(cls, mu) -> "MixingMeasure":
        return cls(np.atleast_2d(np.asarray(mu, dtype=float)), [1.0])

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    def __len__(self):
        return self.n_atoms

    def __repr__(self):
        return f"MixingMeasure(n_atoms={self.n_atoms}, dim={self.dim})"

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def pruned(self, tol: float = 1e-10) -> "MixingMeasure":
        """Drop atoms with weight ``<= tol`` and renormalize."""
        keep = self.weights > tol
        if not keep.any():
            keep = self.weights == self.weights.max()
        return MixingMeasure(self.atoms[keep], self.weights[keep])

    def merged(self, tol: float) -> "MixingMeasure":
        """Merge atoms closer than ``tol``; the merged atom keeps the heavier position."""
        from scipy.spatial import cKDTree

        order = np.argsort(-self.weights, kind="stable")
        tree = cKDTree(self.atoms)
        # rank of each kept atom in ``order``; -1 for atoms merged away
        rank = np.full(self.n_atoms, -1)
        kept, weights = [], []
        for j in order:
            near = np.asarray(tree.query_ball_point(self.atoms[j], tol), dtype=int)
            near = near[rank[near] >= 0]
            if near.size:
                weights[int(rank[near].min())] += self.weights[j]
            else:
                rank[j] = len(kept)
                kept.append(j)
                weights.append(self.weights[j])
        return MixingMeasure(self.atoms[kept], np.array(weights))

    def compact(self, prune_tol: float = 1e-10, diameter: float | None = None) -> "MixingMeasure":
        """Prune small weights then merge near-duplicate atoms."""
        g = self.pruned(prune_tol)
        if diameter is None:
            diameter = _diameter(g.atoms)
        if diameter > 0:
            g = g.merged(MERGE_RTOL * diameter)
        return g


def _diameter(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    from scipy.spatial.distance import pdist

    return float(pdist(points).max())


@dataclass(frozen=True, eq=False)
class AffineMap:
    """Rigid map ``a -> U a + x0`` with orthogonal ``U``."""

    rotation: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        u = np.array(self.rotation, dtype=float)
        x0 = np.array(self.shift, dtype=float).reshape(-1)
        if u.ndim != 2 or u.shape[0] != u.shape[1] or u.shape[0] != x0.size:
            raise DimensionMismatch(f"rotation {u.shape} and shift {x0.shape} are inconsistent")
        if np.abs(u.T @ u - np.eye(u.shape[0])).max() > 1e-10:
            raise ValueError("rotation matrix is not orthogonal")
        object.__setattr__(self, "rotation", u)
        object.__setattr__(self, "shift", x0)

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def translation(cls, shift) -> "AffineMap":
        shift = np.asarray(shift, dtype=float).reshape(-1)
        return cls(np.eye(shift.size), shift)

    @property
    def dim(self) -> int:
        return self.shift.size

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != self.dim:
            raise DimensionMismatch(f"map acts on dimension {self.dim}, got {pts.shape[-1]}")
        return pts @ self.rotation.T + self.shift

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """``self o inner``."""
        return AffineMap(self.rotation @ inner.rotation, self.rotation @ inner.shift + self.shift)

    def inverse(self) -> "AffineMap":
        return AffineMap(self.rotation.T, -self.rotation.T @ self.shift)


def pushforward(measure: MixingMeasure, amap: AffineMap) -> MixingMeasure:
    if measure.dim != amap.dim:
        raise DimensionMismatch(f"measure has dimension {measure.dim}, map {amap.dim}")
    out = MixingMeasure(amap(measure.atoms), measure.weights.copy())
    # keep the exact weights; they already sum to one
    out.weights = measure.weights.copy()
    return out


def transform_dataset(data: Dataset, amap: AffineMap) -> Dataset:
    if data.dim != amap.dim:
        raise DimensionMismatch(f"dataset has dimension {data.dim}, map {amap.dim}")
    xs = amap(data.X)
    cache: dict[int, CovarianceSpec] = {}
    obs = []
    for x, o in zip(xs, data.observations):
        # equal covariance objects are rotated once
        s = cache.get(id(o.sigma))
        if s is None:
            s = cache[id(o.sigma)] = o.sigma.rotated(amap.rotation)
        obs.append(Observation(x, s))
    return Dataset(obs)

"""Support regions for the NPMLE and hypercube-corner grids laid over them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DeltaOutOfRange, DimensionMismatch, GridTooLarge
from .model import Dataset, _diameter

logger = logging.getLogger(__name__)

DEFAULT_GRID_CAP = 2_000_000
#: n * m budget used when the grid resolution is chosen automatically
DEFAULT_KERNEL_BUDGET = 40_000_000
PROPORTIONAL_RTOL = 1e-8


class Region:
    kind: str = ""

    @property
    def diameter(self) -> float:
        raise NotImplementedError

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box ``(lower, upper)`` of the region."""
        raise NotImplementedError

    @property
    def dim(self) -> int:
        return self.bounds[0].size

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def _keep(self, corners, delta):
        """Mask of lattice corners that belong to a cube meeting the region."""
        return np.ones(len(corners), dtype=bool)

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "Region":
        kind = d["kind"]
        if kind == "hull":
            return Hull(np.asarray(d["vertices"], dtype=float))
        if kind == "bbox":
            return BBox(np.asarray(d["lower"], dtype=float), np.asarray(d["upper"], dtype=float))
        if kind == "ball":
            return Ball(np.asarray(d["center"], dtype=float), float(d["radius"]))
        raise ValueError(f"unknown region kind {kind!r}")


@dataclass(eq=False)
class BBox(Region):
    lower: np.ndarray
    upper: np.ndarray
    kind = "bbox"

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.lower.shape != self.upper.shape:
            raise DimensionMismatch("lower and upper corners differ in dimension")
        if np.any(self.lower > self.upper):
            raise ValueError("bounding box has lower > upper")

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    @property
    def bounds(self):
        return self.lower, self.upper

    def contains(self, points, tol=0.0):
        pts = np.atleast_2d(points)
        return np.all((pts >= self.lower - tol) & (pts <= self.upper + tol), axis=1)

    def to_dict(self):
        return {"kind": "bbox", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(eq=False)
class Ball(Region):
    center: np.ndarray
    radius: float
    kind = "ball"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(-1)
        self.radius = float(self.radius)
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def diameter(self):
        return 2.0 * self.radius

    @property
    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def contains(self, points, tol=0.0):
        pts = np.atleast_2d(points)
        return np.linalg.norm(pts - self.center, axis=1) <= self.radius + tol

    def _keep(self, corners, delta):
        return self.contains(corners, tol=delta * math.sqrt(corners.shape[1]))

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(eq=False)
class Hull(Region):
    vertices: np.ndarray
    kind = "hull"
    _equations: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        if v.shape[0] < 1:
            raise ValueError("hull needs at least one vertex")
        self._equations = None
        p = v.shape[1]
        if p >= 2 and v.shape[0] > p:
            from scipy.spatial import ConvexHull, QhullError

            try:
                h = ConvexHull(v)
            except QhullError:
                # affinely degenerate: no facets, grid falls back to the box
                pass
            else:
                v = v[h.vertices]
                self._equations = h.equations
        elif p == 1:
            v = np.array([[v.min()], [v.max()]])
        self.vertices = v

    @property
    def diameter(self):
        return _diameter(self.vertices)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def is_degenerate(self) -> bool:
        return self.vertices.shape[1] >= 2 and self._equations is None

    def contains(self, points, tol=0.0):
        pts = np.atleast_2d(points)
        if self._equations is None:
            lo, hi = self.bounds
            return np.all((pts >= lo - tol) & (pts <= hi + tol), axis=1)
        normals, offsets = self._equations[:, :-1], self._equations[:, -1]
        return np.all(pts @ normals.T + offsets <= tol, axis=1)

    def _keep(self, corners, delta):
        if self._equations is None:
            return np.ones(len(corners), dtype=bool)
        # each facet pushed out by a cube diagonal: superset of the covering cubes
        return self.contains(corners, tol=delta * math.sqrt(corners.shape[1]) + 1e-12)

    def to_dict(self):
        return {"kind": "hull", "vertices": self.vertices.tolist()}


@dataclass(eq=False)
class GridSpec:
    delta: float
    atoms: np.ndarray
    region: Region | None = None

    @property
    def m(self) -> int:
        return self.atoms.shape[0]


def _proportional(data: Dataset) -> bool:
    mats = data.matrices
    norm = mats / np.trace(mats, axis1=1, axis2=2)[:, None, None]
    ref = norm[0]
    return bool(np.abs(norm - ref).max() <= PROPORTIONAL_RTOL * np.abs(ref).max())


def support_region(data: Dataset, mode: str = "auto") -> Region:
    """Outer bound on the NPMLE support computed from the data."""
    X = data.X
    proportional = _proportional(data)
    if mode == "auto":
        if proportional:
            mode = "hull"
        elif data.all_diagonal:
            mode = "bbox"
        else:
            mode = "ball"
    elif mode == "hull" and not proportional:
        logger.warning("hull region requested for non-proportional covariances; it may exclude NPMLE atoms")
    elif mode == "bbox" and not (data.all_diagonal or proportional):
        logger.warning("bbox region requested for non-diagonal covariances; it may exclude NPMLE atoms")

    if mode == "hull":
        return Hull(X)
    if mode == "bbox":
        return BBox(X.min(axis=0), X.max(axis=0))
    if mode == "ball":
        x0 = X.mean(axis=0)
        r = float(np.linalg.norm(X - x0, axis=1).max())
        kappa = data.k_upper / data.k_lower
        if r == 0:
            # every observation coincides; the support is that single point
            return BBox(x0, x0)
        return Ball(x0, kappa * r)
    raise ValueError(f"unknown region mode {mode!r}")


def _axes(region: Region, delta: float, anchor=None):
    lower, upper = region.bounds
    start = lower if anchor is None else np.asarray(anchor, dtype=float) + np.floor(
        (lower - np.asarray(anchor, dtype=float)) / delta
    ) * delta
    counts = np.ceil((upper - start) / delta - 1e-9).astype(int) + 1
    counts = np.maximum(counts, 1)
    return [s + delta * np.arange(c) for s, c in zip(start, counts)]


def lattice_size(region: Region, delta: float, anchor=None) -> int:
    """Number of lattice corners in the region's bounding box (before filtering)."""
    return math.prod(len(a) for a in _axes(region, delta, anchor))


def build_grid(region: Region, delta: float, *, cap: int = DEFAULT_GRID_CAP, anchor=None, extra_atoms=None) -> GridSpec:
    """Corners of the width-``delta`` hypercubes covering ``region``.

    The lattice is anchored at the region's lower corner unless ``anchor`` is
    given. ``extra_atoms`` are appended (e.g. to force known points in).
    """
    delta = float(delta)
    if not delta > 0:
        raise ValueError("delta must be positive")
    axes = _axes(region, delta, anchor)
    total = math.prod(len(a) for a in axes)
    if total > 50 * cap:
        raise GridTooLarge(total, cap)
    p = len(axes)
    kept = []
    count = 0
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, p - 1) if p > 1 else None
    for x0 in axes[0]:
        if rest is None:
            slab = np.array([[x0]])
        else:
            slab = np.column_stack([np.full(len(rest), x0), rest])
        slab = slab[region._keep(slab, delta)]
        count += len(slab)
        if count > cap:
            raise GridTooLarge(count, cap)
        kept.append(slab)
    atoms = np.concatenate(kept, axis=0)
    if extra_atoms is not None:
        extra = np.atleast_2d(np.asarray(extra_atoms, dtype=float))
        if extra.shape[1] != p:
            raise DimensionMismatch("extra atoms have the wrong dimension")
        atoms = np.concatenate([atoms, extra], axis=0)
    atoms = _dedupe(atoms)
    if len(atoms) > cap:
        raise GridTooLarge(len(atoms), cap)
    return GridSpec(delta, atoms, region)


def _dedupe(atoms):
    _, idx = np.unique(atoms, axis=0, return_index=True)
    return atoms[np.sort(idx)]


def delta_upper_limit(p: int, k_lower: float, D: float) -> float:
    """Largest resolution for which the discretization bound holds (exclusive)."""
    if D <= 0:
        return math.inf
    return math.sqrt(3.0 / (4.0 * p)) * k_lower / D


def discretization_bound(p: int, k_lower: float, D: float, delta: float) -> float:
    """Upper bound on the mean log-likelihood lost by gridding at resolution ``delta``."""
    if not 0 < delta < delta_upper_limit(p, k_lower, D):
        raise DeltaOutOfRange(
            f"delta={delta} outside (0, {delta_upper_limit(p, k_lower, D):.6g}) for p={p}, k_lower={k_lower}, D={D}"
        )
    return p * k_lower ** -2 * (2.0 * D * D + 0.5) * delta * delta


def default_delta(data: Dataset, region: Region, *, cap: int = DEFAULT_GRID_CAP,
                  kernel_budget: int = DEFAULT_KERNEL_BUDGET) -> tuple[float, bool]:
    """Resolution meeting the ``(log n)^(p+1) / n`` likelihood-gap target.

    Returns ``(delta, coarsened)``. When the target grid would exceed the
    atom budget ``min(cap, kernel_budget / n)`` the resolution is coarsened to
    fit and ``coarsened`` is true.
    """
    n, p, kl = data.n, data.dim, data.k_lower
    D = region.diameter
    limit = delta_upper_limit(p, kl, D)
    target = math.log(n) ** (p + 1) / n if n > 1 else 0.0
    coef = p * kl ** -2 * (2.0 * D * D + 0.5)
    delta = math.sqrt(target / coef) if target > 0 else math.inf
    delta = min(delta, 0.999 * limit)
    if not math.isfinite(delta):
        lo, hi = region.bounds
        width = float((hi - lo).max())
        delta = width if width > 0 else 1.0
    budget = max(1, min(cap, kernel_budget // n))
    if lattice_size(region, delta) <= budget:
        return delta, False
    lo_d, hi_d = delta, delta
    while lattice_size(region, hi_d) > budget:
        hi_d *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo_d + hi_d)
        if lattice_size(region, mid) > budget:
            lo_d = mid
        else:
            hi_d = mid
    logger.warning(
        "grid resolution coarsened from %.4g to %.4g to respect the atom budget %d", delta, hi_d, budget
    )
    return hi_d, True

import math

import numpy as np
import pytest

from hetnpmle.model import Dataset
from hetnpmle.support import build_grid, lattice_size, support_region

# equilateral design whose NPMLE is not unique
EQUILATERAL_X = np.array([[0.0, 1.0], [math.sqrt(3) / 2, -0.5], [-math.sqrt(3) / 2, -0.5]])
EQUILATERAL_S2 = 3.0 / math.log(256.0)
# 2^{2/3} log 2 / (3 pi), evaluated in closed form below
EQUILATERAL_L = 2.0 ** (2.0 / 3.0) * math.log(2.0) / (3.0 * math.pi)


@pytest.fixture
def equilateral_data():
    return Dataset.from_arrays(EQUILATERAL_X, EQUILATERAL_S2)


@pytest.fixture
def equilateral_atoms():
    return np.vstack([EQUILATERAL_X / 2.0, np.zeros((1, 2))])


def random_diag_dataset(rng, n, p, low=0.3, high=1.5, spread=None):
    spread = rng.uniform(0.5, 2.0) if spread is None else spread
    theta = rng.normal(size=(n, p)) * spread
    var = rng.uniform(low, high, size=(n, p))
    X = theta + rng.normal(size=(n, p)) * np.sqrt(var)
    return Dataset.from_arrays(X, var)


def random_full_dataset(rng, n, p):
    covs = []
    for _ in range(n):
        A = rng.normal(size=(p, p))
        covs.append(A @ A.T + 0.3 * np.eye(p))
    X = rng.normal(size=(n, p)) * 1.5
    return Dataset.from_arrays(X, np.array(covs))


def lattice_instance(rng, max_atoms=200):
    """Random data on its support-region lattice, spacing 0.1 to 0.5 of the
    smallest noise standard deviation, at most ``max_atoms`` atoms."""
    n = int(rng.integers(2, 51))
    p = int(rng.integers(1, 4))
    data = random_diag_dataset(rng, n, p)
    region = support_region(data)
    delta = float(math.sqrt(data.k_lower) * rng.uniform(0.1, 0.5))
    while lattice_size(region, delta) > 50 * max_atoms:
        delta *= 1.1
    grid = build_grid(region, delta)
    while grid.m > max_atoms:
        delta *= 1.1
        grid = build_grid(region, delta)
    return data, grid


def random_simplex(rng, m):
    w = rng.exponential(size=m)
    return w / w.sum()


def random_rotation(rng, p):
    Q, R = np.linalg.qr(rng.normal(size=(p, p)))
    return Q * np.sign(np.diag(R))

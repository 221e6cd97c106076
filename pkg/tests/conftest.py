import functools

import numpy as np
import pytest

from quantraj.fields import ComplexField, Constants, UniformGrid
from quantraj.scenario_io import bundled_scenario


@pytest.fixture
def grid():
    return UniformGrid(-20.0, 20.0, 256)


@pytest.fixture
def consts():
    return Constants()


def band_limited(grid, coeffs, kmax_index=12):
    """Complex field from a few low Fourier modes (used with hypothesis)."""
    vals = np.zeros(grid.n_points, dtype=complex)
    for j, (a, b) in enumerate(coeffs):
        n = j - kmax_index // 2
        vals += (a + 1j * b) * np.exp(2j * np.pi * n * (grid.x - grid.x_min) / grid.length)
    return vals


def field(grid, values, t=0.0):
    return ComplexField(grid, t, values)


@functools.lru_cache(maxsize=None)
def scenario(name):
    return bundled_scenario(name)

import numpy as np
import pytest

from src.lattice import RateSpec2, gaussian_initial, make_grid


@pytest.fixture
def example1_grid():
    """Initial support [-6.9, 6.9] at dx = 0.3: nodes -23..23."""
    return make_grid(0.3, 0.003, -23, 23)


@pytest.fixture
def example1_initial(example1_grid):
    return gaussian_initial(example1_grid, 0.6, 6.9)


@pytest.fixture
def example1_rates():
    return RateSpec2.constant(0.006, 0.006)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)

"""Random instances for oracle comparisons."""

import numpy as np

from src.lattice import GridSpec, JointDensity2, RateForm, RateSpec2
from src.multinomial import MultiDensity, RateMatrix


def random_rates(rng: np.random.Generator) -> RateSpec2:
    """Step probabilities in [0.05, 0.95] that vary with both t and x."""
    a0, b0 = rng.uniform(0.2, 0.8, size=2)
    a1, b1 = rng.uniform(0.0, 0.15, size=2)
    ka, kb, wa, wb = rng.uniform(0.5, 3.0, size=4)

    def alpha(t, x):
        return a0 + a1 * np.sin(ka * x + wa * t)

    def beta(t, x):
        return b0 + b1 * np.cos(kb * x - wb * t)

    return RateSpec2(alpha, beta, RateForm.STEP_PROBABILITY)


def random_joint_density(rng: np.random.Generator, grid: GridSpec, n_occupied: int = 3) -> JointDensity2:
    q_plus = np.zeros(grid.n_nodes)
    q_minus = np.zeros(grid.n_nodes)
    centre = grid.index_of(0)
    for offset in range(n_occupied):
        q_plus[centre + offset - n_occupied // 2] = rng.uniform(0.1, 1.0)
        q_minus[centre + offset - n_occupied // 2] = rng.uniform(0.1, 1.0)
    total = q_plus.sum() + q_minus.sum()
    return JointDensity2(grid, q_plus / total, q_minus / total)


def random_step_matrix(rng: np.random.Generator, j_max: int) -> RateMatrix:
    """Column-stochastic matrix that varies smoothly with x."""
    n = 2 * j_max + 1
    base = rng.uniform(0.1, 1.0, size=(n, n))
    amplitude = rng.uniform(0.0, 0.09, size=(n, n))
    wavenumber = rng.uniform(0.5, 2.0)

    def omega(t, x):
        raw = base[None, :, :] + amplitude[None, :, :] * np.sin(wavenumber * x)[:, None, None]
        return raw / raw.sum(axis=1, keepdims=True)

    return RateMatrix(omega, RateForm.STEP_PROBABILITY, j_max=j_max)


def random_multi_density(rng: np.random.Generator, grid: GridSpec, j_max: int, n_occupied: int = 2) -> MultiDensity:
    q = np.zeros((2 * j_max + 1, grid.n_nodes))
    centre = grid.index_of(0)
    q[:, centre:centre + n_occupied] = rng.uniform(0.1, 1.0, size=(2 * j_max + 1, n_occupied))
    return MultiDensity(grid, j_max, q / q.sum())

"""Two-velocity lattice stepper with forward/backward velocity and acceleration fields.

Switching probabilities are evaluated at the arrival node: a particle that
reaches x at time t + h with velocity +c leaves x downward with probability
alpha(t, x), and symmetrically for beta.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from src.lattice import (
    DEFAULT_RHO_FLOOR,
    GridSpec,
    JointDensity2,
    RateSpec2,
    VelocityField,
    masked_ratio,
    shift_rows,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BinomialTrajectory:
    """Recorded snapshots of a two-velocity run; ``steps[k]`` is the step index of ``snapshots[k]``."""

    grid: GridSpec
    snapshots: Tuple[JointDensity2, ...]
    rates: RateSpec2
    steps: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[JointDensity2]:
        return iter(self.snapshots)

    @property
    def times(self) -> np.ndarray:
        return np.array([snapshot.t for snapshot in self.snapshots])

    @property
    def final(self) -> JointDensity2:
        return self.snapshots[-1]


def _step_arrays(grid: GridSpec, q_plus: np.ndarray, q_minus: np.ndarray,
                 rates: RateSpec2, t: float) -> Tuple[np.ndarray, np.ndarray]:
    alpha, beta = rates.step_probabilities(t, grid.x, grid.dt)
    up, down = shift_rows(np.vstack([q_plus, q_minus]), (1, -1))
    return (1.0 - alpha) * up + beta * down, alpha * up + (1.0 - beta) * down


def step_binomial(q: JointDensity2, rates: RateSpec2, t: Optional[float] = None) -> JointDensity2:
    """Advance one time step.

    Args:
        q: Density at time t.
        rates: Switching law; continuum rates are scaled by the grid's dt.
        t: Time of ``q``; defaults to ``q.t``.

    Returns:
        Density at t + dt on the same grid.

    Raises:
        BoundaryError: Mass would move off the grid.
        ValueError: A step probability falls outside [0, 1].
    """
    t = q.t if t is None else float(t)
    q_plus, q_minus = _step_arrays(q.grid, q.q_plus, q.q_minus, rates, t)
    return JointDensity2(q.grid, q_plus, q_minus, t + q.grid.dt)


def simulate(initial: JointDensity2, rates: RateSpec2, n_steps: int,
             keep_every: int = 1) -> BinomialTrajectory:
    """Apply ``step_binomial`` n_steps times, widening the grid first so the light cone fits.

    Every ``keep_every``-th snapshot is recorded, plus the initial and final ones.
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be nonnegative, got {n_steps}")
    if keep_every < 1:
        raise ValueError(f"keep_every must be at least 1, got {keep_every}")

    start = initial.fit_light_cone(n_steps)
    grid = start.grid
    if grid != initial.grid:
        logger.debug("Grid widened from [%d, %d] to [%d, %d]",
                     initial.grid.m_min, initial.grid.m_max, grid.m_min, grid.m_max)

    snapshots = [start]
    steps = [0]
    q_plus, q_minus = start.q_plus, start.q_minus
    for k in range(n_steps):
        q_plus, q_minus = _step_arrays(grid, q_plus, q_minus, rates, start.t + k * grid.dt)
        if (k + 1) % keep_every == 0 or k + 1 == n_steps:
            snapshots.append(JointDensity2(grid, q_plus, q_minus, start.t + (k + 1) * grid.dt))
            steps.append(k + 1)

    logger.info("Binomial run finished: %d steps, %d snapshots kept", n_steps, len(snapshots))
    return BinomialTrajectory(grid, tuple(snapshots), rates, tuple(steps))


def ballistic_lobe_masses(initial: JointDensity2, rates: RateSpec2, n_steps: int) -> Tuple[float, float]:
    """Mass on the upward and downward wavefronts after ``n_steps``.

    Tracks paths that never reversed direction. A switch on the final arrival
    still counts: that mass already sits on the wavefront.
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be nonnegative, got {n_steps}")
    start = initial.fit_light_cone(n_steps)
    grid = start.grid
    up, down = np.array(start.q_plus), np.array(start.q_minus)
    for k in range(n_steps - 1):
        alpha, beta = rates.step_probabilities(start.t + k * grid.dt, grid.x, grid.dt)
        moved_up, moved_down = shift_rows(np.vstack([up, down]), (1, -1))
        up, down = (1.0 - alpha) * moved_up, (1.0 - beta) * moved_down
    return math.fsum(up), math.fsum(down)


def forward_velocity(q: JointDensity2, c: Optional[float] = None,
                     rho_floor: float = DEFAULT_RHO_FLOOR) -> VelocityField:
    """Expected exit velocity c * phi / rho on nodes with rho >= rho_floor."""
    c = q.grid.c if c is None else c
    v, mask = masked_ratio(c * q.phi, q.rho, rho_floor)
    return VelocityField(v, mask)


def _previous_step_probabilities(q_t: JointDensity2, rates: RateSpec2, t: Optional[float],
                                 h: Optional[float]) -> Tuple[np.ndarray, np.ndarray, float]:
    t = q_t.t if t is None else float(t)
    h = q_t.grid.dt if h is None else float(h)
    alpha, beta = rates.step_probabilities(t - h, q_t.grid.x, h)
    return alpha, beta, h


def invert_step(q_t: JointDensity2, rates: RateSpec2, t: Optional[float] = None,
                h: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Reconstruct the pre-images q+(t-h, x-dx) and q-(t-h, x+dx) at every node x."""
    alpha, beta, _ = _previous_step_probabilities(q_t, rates, t, h)
    det = 1.0 - alpha - beta
    occupied = q_t.rho > 0
    if np.any(det[occupied] <= 0):
        raise ValueError("one-step transition is singular (h*gamma >= 1) on occupied nodes")
    det = np.where(det > 0, det, 1.0)
    up = ((1.0 - beta) * q_t.q_plus - beta * q_t.q_minus) / det
    down = ((1.0 - alpha) * q_t.q_minus - alpha * q_t.q_plus) / det
    return up, down


def backward_velocity(q_t: JointDensity2, rates: RateSpec2, t: Optional[float] = None,
                      h: Optional[float] = None, rho_floor: float = DEFAULT_RHO_FLOOR) -> VelocityField:
    """Mean velocity of the paths arriving at each node.

    With step probabilities a = alpha(t-h, x) and b = beta(t-h, x):
    v- = (v + c(a - b)) / (1 - a - b).

    Raises:
        ValueError: 1 - a - b <= 0 on a node with rho >= rho_floor.
    """
    alpha, beta, _ = _previous_step_probabilities(q_t, rates, t, h)
    forward = forward_velocity(q_t, rho_floor=rho_floor)
    mask = forward.valid_mask
    det = 1.0 - alpha - beta
    if np.any(det[mask] <= 0):
        raise ValueError("backward velocity is singular: h*gamma >= 1 on occupied nodes")
    det = np.where(mask, det, 1.0)
    v_minus = (forward.v + q_t.grid.c * (alpha - beta)) / det
    return VelocityField(v_minus, mask)


def acceleration_field(q_t: JointDensity2, rates: RateSpec2, t: Optional[float] = None,
                       h: Optional[float] = None, rho_floor: float = DEFAULT_RHO_FLOOR) -> VelocityField:
    """(v - v-) / h on the masked nodes."""
    h = q_t.grid.dt if h is None else float(h)
    forward = forward_velocity(q_t, rho_floor=rho_floor)
    backward = backward_velocity(q_t, rates, t, h, rho_floor)
    return VelocityField((forward.v - backward.v) / h, forward.valid_mask)


def direct_backward_velocity(previous: JointDensity2, current: JointDensity2,
                             rho_floor: float = DEFAULT_RHO_FLOOR) -> VelocityField:
    """Backward velocity by Bayes from two consecutive snapshots:
    c * (q+(t-h, x-dx) - q-(t-h, x+dx)) / rho(t, x).
    """
    if previous.grid != current.grid:
        raise ValueError("snapshots must share a grid")
    if not math.isclose(current.t - previous.t, current.grid.dt, rel_tol=1e-9):
        raise ValueError("snapshots must be one time step apart")
    arrived_up, arrived_down = shift_rows(np.vstack([previous.q_plus, previous.q_minus]), (1, -1))
    v, mask = masked_ratio(current.grid.c * (arrived_up - arrived_down), current.rho, rho_floor)
    return VelocityField(v, mask)


def parity_class_masses(q: JointDensity2, step: int = 0) -> Tuple[float, float]:
    """Mass on nodes with m + step even, and with m + step odd.

    Each step moves every particle by exactly one node, so both class masses
    are conserved when ``step`` counts the steps taken.
    """
    odd = (q.grid.nodes + step) % 2 == 1
    rho = q.rho
    return math.fsum(rho[~odd]), math.fsum(rho[odd])

"""Multi-velocity lattice stepper.

Velocity index j runs over -J..J with velocity j * c. Row ``j + J`` of every
array holds velocity j. One step shifts the velocity-k row by k nodes and then
mixes velocities at the arrival node with column k of the step matrix:

    q^j(t + h, x) = sum_k W_jk(t, x) q^k(t, x - k dx)
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.lattice import (
    DEFAULT_RHO_FLOOR,
    MASS_TOLERANCE,
    NEGATIVITY_TOLERANCE,
    ConservationError,
    GridSpec,
    JointDensity2,
    RateForm,
    RateSpec2,
    VelocityField,
    embed_rows,
    frozen_array,
    light_cone_grid,
    masked_ratio,
    min_entry,
    shift_rows,
    total_mass,
)

logger = logging.getLogger(__name__)

EDGE_OCCUPANCY_LIMIT = 1e-6
SIGN_RESOLUTION = 1e-9
COLUMN_SUM_TOLERANCE = 1e-12

MatrixFunction = Callable[[float, np.ndarray], np.ndarray]


def velocity_indices(j_max: int) -> np.ndarray:
    return np.arange(-j_max, j_max + 1)


@dataclass(frozen=True, eq=False)
class MultiDensity:
    """Joint mass q[j + J, node] over velocities -J..J and the nodes of ``grid``."""

    grid: GridSpec
    j_max: int
    q: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if int(self.j_max) < 0:
            raise ValueError(f"j_max must be nonnegative, got {self.j_max}")
        q = frozen_array(self.q, "q", 2)
        expected = (2 * int(self.j_max) + 1, self.grid.n_nodes)
        if q.shape != expected:
            raise ValueError(f"q must have shape {expected}, got {q.shape}")
        object.__setattr__(self, "j_max", int(self.j_max))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def from_joint_density(cls, q2: JointDensity2) -> "MultiDensity":
        """Embed a two-velocity density as J = 1 with an empty j = 0 row."""
        rows = np.vstack([q2.q_minus, np.zeros(q2.grid.n_nodes), q2.q_plus])
        return cls(q2.grid, 1, rows, q2.t)

    @classmethod
    def from_profile(cls, grid: GridSpec, j_max: int, profile: np.ndarray,
                     weights: Optional[np.ndarray] = None) -> "MultiDensity":
        """Spread a position profile over velocities with the given weights (uniform by default)."""
        n_velocities = 2 * j_max + 1
        weights = np.full(n_velocities, 1.0 / n_velocities) if weights is None else np.asarray(weights, float)
        profile = np.asarray(profile, dtype=float)
        rows = np.outer(weights, profile)
        return cls(grid, j_max, rows / math.fsum(rows.ravel()))

    @property
    def velocities(self) -> np.ndarray:
        return velocity_indices(self.j_max) * self.grid.c

    @property
    def rho(self) -> np.ndarray:
        return self.q.sum(axis=0)

    def row(self, j: int) -> np.ndarray:
        if abs(j) > self.j_max:
            raise ValueError(f"velocity index {j} outside -{self.j_max}..{self.j_max}")
        return self.q[j + self.j_max]

    def as_array(self) -> np.ndarray:
        return self.q

    def mean_velocity(self) -> float:
        mass = total_mass(self)
        if mass == 0.0:
            return 0.0
        flux = self.velocities @ self.q
        return math.fsum(flux) / mass

    def edge_occupancy(self) -> float:
        """Mass in the outermost velocity rows +-J."""
        if self.j_max == 0:
            return 0.0
        return math.fsum(self.q[0]) + math.fsum(self.q[-1])

    def on_grid(self, grid: GridSpec) -> "MultiDensity":
        if grid == self.grid:
            return self
        return MultiDensity(grid, self.j_max, embed_rows(self.q, self.grid, grid), self.t)

    def fit_light_cone(self, n_steps: int) -> "MultiDensity":
        return self.on_grid(light_cone_grid(self.grid, self.rho, self.j_max * n_steps))

    def validate(self, expected_mass: float = 1.0, tol: float = MASS_TOLERANCE) -> None:
        lowest = min_entry(self)
        if lowest < -NEGATIVITY_TOLERANCE:
            raise ConservationError(f"negative joint mass {lowest:.3e} at t={self.t}")
        mass = total_mass(self)
        if abs(mass - expected_mass) > tol:
            raise ConservationError(f"total mass {mass:.17g} drifted from {expected_mass:.17g} at t={self.t}")


def _check_matrices(matrices: np.ndarray, form: RateForm) -> None:
    sums = matrices.sum(axis=-2)
    n = matrices.shape[-1]
    if form is RateForm.STEP_PROBABILITY:
        if np.any(np.abs(sums - 1.0) > COLUMN_SUM_TOLERANCE):
            raise ValueError(f"step matrix columns must sum to 1 (worst {np.abs(sums - 1.0).max():.3e})")
        if np.any(matrices < 0.0) or np.any(matrices > 1.0 + COLUMN_SUM_TOLERANCE):
            raise ValueError("step matrix entries must lie in [0, 1]")
    else:
        scale = max(1.0, float(np.abs(matrices).max()))
        if np.any(np.abs(sums) > COLUMN_SUM_TOLERANCE * scale):
            raise ValueError(f"rate matrix columns must sum to 0 (worst {np.abs(sums).max():.3e})")
        off_diagonal = ~np.eye(n, dtype=bool)
        if np.any(matrices[..., off_diagonal] < 0.0):
            raise ValueError("rate matrix off-diagonal entries must be nonnegative")
        if np.any(np.diagonal(matrices, axis1=-2, axis2=-1) > 0.0):
            raise ValueError("rate matrix diagonal entries must be nonpositive")


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Velocity switching matrix omega[j + J, k + J], constant or a function of (t, x).

    A function must return shape (len(x), N, N) or a single (N, N) matrix.
    """

    omega: Union[np.ndarray, MatrixFunction]
    form: RateForm = RateForm.STEP_PROBABILITY
    j_max: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "form", RateForm(self.form))
        if callable(self.omega):
            if self.j_max is None:
                raise ValueError("j_max is required for a position-dependent rate matrix")
            return
        matrix = frozen_array(self.omega, "omega", 2)
        n = matrix.shape[0]
        if matrix.shape != (n, n) or n % 2 == 0:
            raise ValueError(f"omega must be square with odd size 2J+1, got {matrix.shape}")
        if self.j_max is not None and n != 2 * self.j_max + 1:
            raise ValueError(f"omega size {n} does not match j_max={self.j_max}")
        _check_matrices(matrix, self.form)
        object.__setattr__(self, "omega", matrix)
        object.__setattr__(self, "j_max", (n - 1) // 2)

    @classmethod
    def constant(cls, matrix, form: RateForm = RateForm.STEP_PROBABILITY) -> "RateMatrix":
        return cls(np.asarray(matrix, dtype=float), form)

    @classmethod
    def from_binomial(cls, rates: RateSpec2, dt: float) -> "RateMatrix":
        """J = 1 step matrix equivalent to a two-velocity switching law."""

        def build(alpha, beta):
            matrix = np.zeros(np.shape(alpha) + (3, 3))
            matrix[..., 0, 0] = 1.0 - beta
            matrix[..., 2, 0] = beta
            matrix[..., 1, 1] = 1.0
            matrix[..., 0, 2] = alpha
            matrix[..., 2, 2] = 1.0 - alpha
            return matrix

        if rates.is_constant:
            alpha, beta = rates.step_probabilities(0.0, np.zeros(()), dt)
            return cls(build(float(alpha), float(beta)), RateForm.STEP_PROBABILITY)

        def omega(t, x):
            return build(*rates.step_probabilities(t, x, dt))

        return cls(omega, RateForm.STEP_PROBABILITY, j_max=1)

    @property
    def is_constant(self) -> bool:
        return not callable(self.omega)

    @property
    def size(self) -> int:
        return 2 * self.j_max + 1

    def at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Matrix (N, N) when constant, else per-node matrices (len(x), N, N), validated."""
        if self.is_constant:
            return self.omega
        x = np.asarray(x, dtype=float)
        matrices = np.asarray(self.omega(t, x), dtype=float)
        if matrices.shape == (self.size, self.size):
            matrices = np.broadcast_to(matrices, x.shape + matrices.shape)
        if matrices.shape != x.shape + (self.size, self.size):
            raise ValueError(f"rate function returned shape {matrices.shape}")
        _check_matrices(matrices, self.form)
        return matrices


def _to_step(matrices: np.ndarray, h: float) -> np.ndarray:
    n = matrices.shape[-1]
    off_diagonal = h * matrices * (1.0 - np.eye(n))
    diagonal = 1.0 - off_diagonal.sum(axis=-2)
    if np.any(diagonal < 0.0):
        raise ValueError(
            f"time step too large: 1 + h*omega_kk = {diagonal.min():.3e} < 0 gives negative probabilities"
        )
    idx = np.arange(n)
    step = off_diagonal.copy()
    step[..., idx, idx] = diagonal
    return step


def rate_to_step(omega_rate: RateMatrix, h: float) -> RateMatrix:
    """Convert a generator to the one-step matrix I + h * omega."""
    if omega_rate.form is not RateForm.CONTINUUM_RATE:
        raise ValueError("rate_to_step expects a continuum-rate matrix")
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    if omega_rate.is_constant:
        return RateMatrix(_to_step(omega_rate.omega, h), RateForm.STEP_PROBABILITY)

    def omega(t, x):
        return _to_step(omega_rate.at(t, x), h)

    return RateMatrix(omega, RateForm.STEP_PROBABILITY, j_max=omega_rate.j_max)


@dataclass(frozen=True)
class NewtonRates:
    """Rates alpha = theta + V'/(2c), beta = theta - V'/(2c) for motion in a potential V."""

    theta: float
    potential_gradient: Callable[[np.ndarray], np.ndarray]
    c: float
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError(f"theta must be nonnegative, got {self.theta}")
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")

    @classmethod
    def linear(cls, theta: float, gradient: float, c: float) -> "NewtonRates":
        """Uniform force: V(x) = gradient * x."""
        return cls(theta, lambda x: np.full(np.shape(x), float(gradient)), c,
                   lambda x: float(gradient) * np.asarray(x, dtype=float))

    @classmethod
    def harmonic(cls, theta: float, curvature: float, c: float) -> "NewtonRates":
        """Oscillator: V(x) = curvature * x**2 / 2."""
        return cls(theta, lambda x: float(curvature) * np.asarray(x, dtype=float), c,
                   lambda x: 0.5 * float(curvature) * np.asarray(x, dtype=float) ** 2)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.potential_gradient(x), dtype=float), x.shape)

    def alpha(self, x: np.ndarray) -> np.ndarray:
        return self.theta + self.gradient(x) / (2.0 * self.c)

    def beta(self, x: np.ndarray) -> np.ndarray:
        return self.theta - self.gradient(x) / (2.0 * self.c)

    def lam(self, x: np.ndarray) -> np.ndarray:
        return self.alpha(x) + self.beta(x)

    def admissible(self, x: np.ndarray) -> np.ndarray:
        """Nodes where both rates stay strictly positive: |V'(x) / (2c)| < theta."""
        return np.abs(self.gradient(x)) / (2.0 * self.c) < self.theta

    def clipped_rates(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(alpha, beta) with the tilt V'/(2c) held in [-theta, theta]; exact wherever ``admissible``."""
        tilt = np.clip(self.gradient(x) / (2.0 * self.c), -self.theta, self.theta)
        return self.theta + tilt, self.theta - tilt

    def check(self, x: np.ndarray) -> None:
        """Both rates must stay strictly positive: |V'(x) / (2c)| < theta."""
        tilt = np.abs(self.gradient(x)) / (2.0 * self.c)
        if np.any(tilt >= self.theta):
            raise ValueError(
                f"rate negativity: |V'/(2c)| reaches {tilt.max():.6g} >= theta={self.theta}"
            )


def second_difference_matrix(j_max: int) -> np.ndarray:
    """Symmetric tridiagonal (1, -2, 1) matrix over velocities -J..J."""
    n = 2 * j_max + 1
    return -2.0 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)


def gradient_matrix(j_max: int, gradient: float) -> np.ndarray:
    """Antisymmetric matrix with +V' above and -V' below the diagonal."""
    n = 2 * j_max + 1
    return gradient * (np.eye(n, k=1) - np.eye(n, k=-1))


def _newton_columns(alpha: np.ndarray, beta: np.ndarray, j_max: int) -> np.ndarray:
    """Tridiagonal generators with alpha above, beta below the diagonal and zero column sums.

    The outermost columns lose the transition that would leave -J..J, so
    column J keeps -alpha and column -J keeps -beta on the diagonal.
    """
    n = 2 * j_max + 1
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    matrices = np.zeros(alpha.shape + (n, n))
    cols = np.arange(1, n)
    matrices[..., cols - 1, cols] = alpha[..., None]
    matrices[..., cols, cols - 1] = beta[..., None]
    idx = np.arange(n)
    matrices[..., idx, idx] = -matrices.sum(axis=-2)
    return matrices


def build_newton_rate_matrix(nr: NewtonRates, j_max: int, x: float) -> RateMatrix:
    """Continuum-rate Newton generator at position x.

    Interior columns equal theta * D + G / (2c) with D from
    ``second_difference_matrix`` and G from ``gradient_matrix``.
    """
    if j_max < 1:
        raise ValueError(f"j_max must be at least 1, got {j_max}")
    nr.check(np.asarray(x))
    matrix = _newton_columns(nr.alpha(np.asarray(x, float)), nr.beta(np.asarray(x, float)), j_max)
    return RateMatrix(matrix, RateForm.CONTINUUM_RATE)


def newton_rate_field(nr: NewtonRates, j_max: int, clip: bool = False) -> RateMatrix:
    """Position-dependent Newton generator evaluated at each arrival node.

    With ``clip`` the tilt is saturated on nodes outside ``nr.admissible``
    instead of raising; the field is exact only where mass stays admissible,
    which ``inadmissible_mass`` measures after the run.
    """
    if j_max < 1:
        raise ValueError(f"j_max must be at least 1, got {j_max}")

    def omega(t, x):
        if clip:
            return _newton_columns(*nr.clipped_rates(x), j_max)
        nr.check(x)
        return _newton_columns(nr.alpha(x), nr.beta(x), j_max)

    return RateMatrix(omega, RateForm.CONTINUUM_RATE, j_max=j_max)


def _mix(matrices: np.ndarray, arrivals: np.ndarray) -> np.ndarray:
    if matrices.ndim == 2:
        return matrices @ arrivals
    return np.einsum("mjk,km->jm", matrices, arrivals)


def _require_step_matrix(omega: RateMatrix, j_max: int) -> None:
    if omega.form is not RateForm.STEP_PROBABILITY:
        raise ValueError("a step-probability matrix is required; convert rates with rate_to_step")
    if omega.j_max != j_max:
        raise ValueError(f"matrix j_max={omega.j_max} does not match density j_max={j_max}")


def _step_array(grid: GridSpec, q: np.ndarray, omega: RateMatrix, j_max: int, t: float) -> np.ndarray:
    arrivals = shift_rows(q, velocity_indices(j_max))
    return _mix(omega.at(t, grid.x), arrivals)


def step_multinomial(q: MultiDensity, omega: RateMatrix, t: Optional[float] = None) -> MultiDensity:
    """Shift every velocity row by its index, then mix with omega at the arrival node."""
    _require_step_matrix(omega, q.j_max)
    t = q.t if t is None else float(t)
    return MultiDensity(q.grid, q.j_max, _step_array(q.grid, q.q, omega, q.j_max, t), t + q.grid.dt)


@dataclass(frozen=True, eq=False)
class MultiTrajectory:
    grid: GridSpec
    snapshots: Tuple[MultiDensity, ...]
    omega: RateMatrix
    steps: Tuple[int, ...]
    max_edge_occupancy: float

    def __len__(self) -> int:
        return len(self.snapshots)

    def __iter__(self) -> Iterator[MultiDensity]:
        return iter(self.snapshots)

    @property
    def times(self) -> np.ndarray:
        return np.array([snapshot.t for snapshot in self.snapshots])

    @property
    def final(self) -> MultiDensity:
        return self.snapshots[-1]

    @property
    def truncation_flagged(self) -> bool:
        return self.max_edge_occupancy > EDGE_OCCUPANCY_LIMIT


def simulate_multinomial(initial: MultiDensity, omega: RateMatrix, n_steps: int,
                         keep_every: int = 1) -> MultiTrajectory:
    """Run ``n_steps`` multinomial steps on a grid widened by J nodes per step and side."""
    if n_steps < 0:
        raise ValueError(f"n_steps must be nonnegative, got {n_steps}")
    if keep_every < 1:
        raise ValueError(f"keep_every must be at least 1, got {keep_every}")
    _require_step_matrix(omega, initial.j_max)

    start = initial.fit_light_cone(n_steps)
    grid, j_max = start.grid, start.j_max
    snapshots = [start]
    steps = [0]
    edge = start.edge_occupancy()
    q = start.q
    for k in range(n_steps):
        q = _step_array(grid, q, omega, j_max, start.t + k * grid.dt)
        if j_max > 0:
            edge = max(edge, math.fsum(q[0]) + math.fsum(q[-1]))
        if (k + 1) % keep_every == 0 or k + 1 == n_steps:
            snapshots.append(MultiDensity(grid, j_max, q, start.t + (k + 1) * grid.dt))
            steps.append(k + 1)

    if edge > EDGE_OCCUPANCY_LIMIT:
        logger.warning("Velocity truncation at J=%d carries %.3e of the mass on the edge rows", j_max, edge)
    return MultiTrajectory(grid, tuple(snapshots), omega, tuple(steps), edge)


def inadmissible_mass(trajectory: MultiTrajectory, nr: NewtonRates) -> float:
    """Largest mass on nodes where the Newton rates would turn negative, over the kept snapshots."""
    outside = ~nr.admissible(trajectory.grid.x)
    if not outside.any():
        return 0.0
    return max(math.fsum(snapshot.rho[outside]) for snapshot in trajectory.snapshots)


def mean_velocity_multi(q: MultiDensity, rho_floor: float = DEFAULT_RHO_FLOOR) -> VelocityField:
    """Conditional mean velocity c * sum_j j q^j / rho per node."""
    v, mask = masked_ratio(q.velocities @ q.q, q.rho, rho_floor)
    return VelocityField(v, mask)


def _velocity_change(q_t: MultiDensity, omega_step: RateMatrix, h: float, t: Optional[float],
                     rho_floor: float) -> Tuple[np.ndarray, np.ndarray]:
    """sum_jk v_j (W - I)_jk q^k / rho with W taken at the step that produced q_t."""
    _require_step_matrix(omega_step, q_t.j_max)
    t = q_t.t if t is None else float(t)
    matrices = omega_step.at(t - h, q_t.grid.x)
    jump = matrices - np.eye(omega_step.size)
    if jump.ndim == 2:
        flux = (q_t.velocities @ jump) @ q_t.q
    else:
        flux = np.einsum("j,mjk,km->m", q_t.velocities, jump, q_t.q)
    return masked_ratio(flux, q_t.rho, rho_floor)


def backward_velocity_multi(q_t: MultiDensity, omega_step: RateMatrix, h: Optional[float] = None,
                            rho_floor: float = DEFAULT_RHO_FLOOR, t: Optional[float] = None) -> VelocityField:
    """First-order backward velocity v- = v - sum_jk v_j (W - I)_jk q^k / rho.

    Uses (I + h omega)^-1 ~ I - h omega, so the error is O(h^2).
    """
    h = q_t.grid.dt if h is None else float(h)
    forward = mean_velocity_multi(q_t, rho_floor)
    change, mask = _velocity_change(q_t, omega_step, h, t, rho_floor)
    return VelocityField(forward.v - change, mask)


def acceleration_multi(q_t: MultiDensity, omega_step: RateMatrix, h: Optional[float] = None,
                       rho_floor: float = DEFAULT_RHO_FLOOR, t: Optional[float] = None) -> VelocityField:
    """(v - v-) / h = sum_jk v_j omega_jk q^k / rho."""
    h = q_t.grid.dt if h is None else float(h)
    change, mask = _velocity_change(q_t, omega_step, h, t, rho_floor)
    return VelocityField(change / h, mask)


def continuity_residual(previous: MultiDensity, current: MultiDensity) -> np.ndarray:
    """(rho(t+h) - rho(t)) / h + d/dx (v rho)(t) with central differences, interior nodes only."""
    if previous.grid != current.grid:
        raise ValueError("snapshots must share a grid")
    grid = previous.grid
    h = current.t - previous.t
    if not h > 0:
        raise ValueError("current snapshot must come after previous")
    if grid.n_nodes < 3:
        raise ValueError("continuity residual needs at least 3 nodes")
    flux = previous.velocities @ previous.q
    d_flux = (flux[2:] - flux[:-2]) / (2.0 * grid.dx)
    return (current.rho[1:-1] - previous.rho[1:-1]) / h + d_flux


def _uniform_spacing(trajectory, minimum: int) -> float:
    if len(trajectory.snapshots) < minimum:
        raise ValueError(f"need at least {minimum} snapshots, got {len(trajectory.snapshots)}")
    gaps = np.diff(np.asarray(trajectory.steps))
    if np.any(gaps != gaps[0]):
        raise ValueError("snapshots must be evenly spaced in time")
    return float(gaps[0]) * trajectory.grid.dt


def _expected_positions(trajectory) -> np.ndarray:
    x = trajectory.grid.x
    return np.array([math.fsum(x * snapshot.rho) / total_mass(snapshot) for snapshot in trajectory.snapshots])


@dataclass(frozen=True, eq=False)
class NewtonReport:
    """Second time difference of E[x] against E[V'(x)] at interior snapshot times."""

    times: np.ndarray
    d2_mean: np.ndarray
    mean_gradient: np.ndarray
    relative_error: np.ndarray
    observed_sign: int

    def middle_half(self) -> slice:
        n = len(self.times)
        return slice(n // 4, n - n // 4)

    def to_records(self) -> List[Dict[str, float]]:
        return [
            {"t": float(t), "d2Ex_dt2": float(d2), "E_Vprime": float(ev)}
            for t, d2, ev in zip(self.times, self.d2_mean, self.mean_gradient)
        ]


def newton_check(trajectory: MultiTrajectory, nr: NewtonRates) -> NewtonReport:
    """Compare d^2 E[x] / dt^2 with sum_m V'(x_m) rho(t, m).

    ``observed_sign`` is the sign relating the two series (the lattice gives -1),
    or 0 when E[V'] vanishes throughout;
    ``relative_error`` is (d2 - sign * E[V']) / |E[V']|, NaN where E[V'] vanishes.
    """
    spacing = _uniform_spacing(trajectory, 3)
    means = _expected_positions(trajectory)
    d2 = (means[2:] - 2.0 * means[1:-1] + means[:-2]) / spacing ** 2
    gradient = nr.gradient(trajectory.grid.x)
    mean_gradient = np.array(
        [math.fsum(gradient * snapshot.rho) / total_mass(snapshot) for snapshot in trajectory.snapshots[1:-1]]
    )
    absolute_gradient = np.array(
        [math.fsum(np.abs(gradient) * snapshot.rho) / total_mass(snapshot) for snapshot in trajectory.snapshots[1:-1]]
    )
    if np.max(np.abs(mean_gradient), initial=0.0) <= SIGN_RESOLUTION * np.max(absolute_gradient, initial=0.0):
        # E[V'] is zero up to roundoff, so the series carry no sign
        logger.warning("Newton check: E[V'] vanishes on this run; the observed sign is undetermined")
        observed_sign = 0
    else:
        observed_sign = int(np.sign(float(np.dot(d2, mean_gradient))))
    with np.errstate(divide="ignore", invalid="ignore"):
        relative_error = np.where(
            mean_gradient != 0.0,
            (d2 - (observed_sign or 1) * mean_gradient) / np.abs(mean_gradient),
            np.nan,
        )
    logger.info("Newton check: observed sign %+d over %d interior times", observed_sign, len(d2))
    return NewtonReport(trajectory.times[1:-1], d2, mean_gradient, relative_error, observed_sign)


def total_energy_series(trajectory: MultiTrajectory, potential: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Kinetic energy 1/2 sum_j v_j^2 q^j plus potential energy sum_m V(x_m) rho(m), per snapshot."""
    x = trajectory.grid.x
    potential_values = np.broadcast_to(np.asarray(potential(x), dtype=float), x.shape)
    energies = []
    for snapshot in trajectory.snapshots:
        kinetic = 0.5 * math.fsum((snapshot.velocities ** 2) @ snapshot.q)
        energies.append(kinetic + math.fsum(potential_values * snapshot.rho))
    return np.array(energies)


@dataclass(frozen=True, eq=False)
class EnergyReport:
    """Finite-difference energy drift between snapshots against theta * c^2."""

    times: np.ndarray
    energy: np.ndarray
    drift: np.ndarray
    expected_drift: float
    relative_error: np.ndarray

    def to_records(self) -> List[Dict[str, float]]:
        drift = [float(d) for d in self.drift] + [None]
        return [
            {"t": float(t), "energy": float(e), "drift": d}
            for t, e, d in zip(self.times, self.energy, drift)
        ]


def energy_check(trajectory: MultiTrajectory, nr: NewtonRates) -> EnergyReport:
    if nr.potential is None:
        raise ValueError("energy check needs the potential V (antiderivative of V'); none supplied")
    spacing = _uniform_spacing(trajectory, 2)
    energy = total_energy_series(trajectory, nr.potential)
    drift = np.diff(energy) / spacing
    expected = nr.theta * trajectory.grid.c ** 2
    relative_error = drift / expected - 1.0 if expected > 0 else np.full_like(drift, np.nan)
    return EnergyReport(trajectory.times, energy, drift, expected, relative_error)


def characteristic_shift(q: MultiDensity, t_steps: int) -> MultiDensity:
    """Move row j by j * t_steps nodes toward lower indices: psi^j(x) = q^j(x + j t_steps dx)."""
    offsets = -velocity_indices(q.j_max) * int(t_steps)
    return MultiDensity(q.grid, q.j_max, shift_rows(q.q, offsets), q.t)


def mixed_frame_step(psi: MultiDensity, omega: RateMatrix, step_index: int,
                     t: Optional[float] = None) -> MultiDensity:
    """Advance a characteristic-frame density from step n to n + 1.

    psi_{n+1}^j = sum_k H_j W_jk H_k^-1 psi_n^k with every translation taken at
    time t_{n+1}, so undoing the frame shift reproduces ``step_multinomial``.
    """
    _require_step_matrix(omega, psi.j_max)
    t = psi.t if t is None else float(t)
    offsets = velocity_indices(psi.j_max) * (int(step_index) + 1)
    arrivals = shift_rows(psi.q, offsets)
    mixed = _mix(omega.at(t, psi.grid.x), arrivals)
    return MultiDensity(psi.grid, psi.j_max, shift_rows(mixed, -offsets), t + psi.grid.dt)

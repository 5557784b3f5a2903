"""Grids, joint densities and rate specifications shared by the lattice steppers."""

import logging
import math
import numbers
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

RateFunction = Callable[[float, np.ndarray], np.ndarray]
RateValue = Union[float, RateFunction]

MASS_TOLERANCE = 1e-12
NEGATIVITY_TOLERANCE = 1e-16
DEFAULT_RHO_FLOOR = 1e-14


class BoundaryError(ValueError):
    """Raised when a step would carry nonzero mass off the grid."""


class ConservationError(RuntimeError):
    """Raised when a density has lost mass or picked up negative entries."""


def frozen_array(values, name: str, ndim: int) -> np.ndarray:
    """Copy ``values`` into a read-only float array of the given rank."""
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GridSpec:
    """Uniform space/time lattice. Node m sits at x = m * dx."""

    dx: float
    dt: float
    m_min: int
    m_max: int

    def __post_init__(self):
        if not (math.isfinite(self.dx) and self.dx > 0):
            raise ValueError(f"dx must be positive, got {self.dx}")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not isinstance(self.m_min, numbers.Integral) or not isinstance(self.m_max, numbers.Integral):
            raise ValueError("node bounds must be integers")
        if self.m_min > self.m_max:
            raise ValueError(f"m_min ({self.m_min}) must not exceed m_max ({self.m_max})")
        if not math.isfinite(self.dx / self.dt):
            raise ValueError("dx/dt overflows; characteristic speed must be finite")

    @property
    def c(self) -> float:
        """Characteristic speed dx/dt."""
        return self.dx / self.dt

    @property
    def n_nodes(self) -> int:
        return self.m_max - self.m_min + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.m_min, self.m_max + 1)

    @property
    def x(self) -> np.ndarray:
        return self.nodes * self.dx

    def index_of(self, m: int) -> int:
        if not self.m_min <= m <= self.m_max:
            raise BoundaryError(f"node {m} outside grid [{self.m_min}, {self.m_max}]")
        return int(m - self.m_min)

    def same_lattice(self, other: "GridSpec") -> bool:
        return self.dx == other.dx and self.dt == other.dt

    def covering(self, m_lo: int, m_hi: int) -> "GridSpec":
        """Smallest grid on the same lattice containing this grid and [m_lo, m_hi]."""
        return GridSpec(self.dx, self.dt, min(self.m_min, int(m_lo)), max(self.m_max, int(m_hi)))

    def widened(self, n_nodes: int) -> "GridSpec":
        return GridSpec(self.dx, self.dt, self.m_min - int(n_nodes), self.m_max + int(n_nodes))


def make_grid(dx: float, dt: float, m_min: int, m_max: int) -> GridSpec:
    """Build a GridSpec; raises ValueError on nonpositive steps or inverted bounds."""
    return GridSpec(float(dx), float(dt), int(m_min), int(m_max))


def embed_rows(values: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    """Place node-indexed ``values`` (last axis) from ``source`` into the larger ``target`` grid."""
    if not source.same_lattice(target):
        raise ValueError("cannot embed densities across different lattices")
    if source.m_min < target.m_min or source.m_max > target.m_max:
        raise BoundaryError("target grid does not cover the source grid")
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape[:-1] + (target.n_nodes,))
    offset = source.m_min - target.m_min
    out[..., offset:offset + source.n_nodes] = values
    return out


def shift_rows(values: np.ndarray, offsets: Sequence[int]) -> np.ndarray:
    """Translate row r of ``values`` by ``offsets[r]`` nodes toward higher indices.

    Mass that would be pushed past either end of the grid raises BoundaryError
    instead of being dropped or wrapped around.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    out = np.zeros_like(values)
    for row, shift in enumerate(offsets):
        source = values[row]
        shift = int(shift)
        if shift == 0:
            out[row] = source
            continue
        width = abs(shift)
        if width >= n:
            if np.any(source != 0.0):
                raise BoundaryError(f"shift of {shift} nodes moves every occupied node off the grid")
            continue
        if shift > 0:
            if np.any(source[n - width:] != 0.0):
                raise BoundaryError(f"mass at the upper grid edge would move {shift} nodes off the grid")
            out[row, width:] = source[:n - width]
        else:
            if np.any(source[:width] != 0.0):
                raise BoundaryError(f"mass at the lower grid edge would move {width} nodes off the grid")
            out[row, :n - width] = source[width:]
    return out


def occupied_span(grid: GridSpec, rho: np.ndarray) -> Optional[Tuple[int, int]]:
    """Lowest and highest node carrying nonzero mass, or None for an empty density."""
    occupied = np.flatnonzero(np.asarray(rho) != 0.0)
    if occupied.size == 0:
        return None
    return int(grid.nodes[occupied[0]]), int(grid.nodes[occupied[-1]])


def light_cone_grid(grid: GridSpec, rho: np.ndarray, reach: int) -> GridSpec:
    """Grid wide enough that mass spreading ``reach`` nodes per side never leaves it."""
    span = occupied_span(grid, rho)
    if span is None:
        return grid
    return grid.covering(span[0] - reach, span[1] + reach)


@dataclass(frozen=True, eq=False)
class JointDensity2:
    """Up/down joint masses q+ and q- over the nodes of ``grid`` at time ``t``."""

    grid: GridSpec
    q_plus: np.ndarray
    q_minus: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        q_plus = frozen_array(self.q_plus, "q_plus", 1)
        q_minus = frozen_array(self.q_minus, "q_minus", 1)
        expected = (self.grid.n_nodes,)
        if q_plus.shape != expected or q_minus.shape != expected:
            raise ValueError(
                f"q_plus {q_plus.shape} and q_minus {q_minus.shape} must both have shape {expected}"
            )
        object.__setattr__(self, "q_plus", q_plus)
        object.__setattr__(self, "q_minus", q_minus)
        object.__setattr__(self, "t", float(self.t))

    @property
    def rho(self) -> np.ndarray:
        return self.q_plus + self.q_minus

    @property
    def phi(self) -> np.ndarray:
        return self.q_plus - self.q_minus

    def as_array(self) -> np.ndarray:
        """Stack the velocity rows in increasing velocity order (down, up)."""
        return np.vstack([self.q_minus, self.q_plus])

    def mean_velocity(self) -> float:
        """Mass-weighted mean exit velocity c * sum(phi) / sum(rho)."""
        mass = math.fsum(self.rho)
        if mass == 0.0:
            return 0.0
        return self.grid.c * math.fsum(self.phi) / mass

    def on_grid(self, grid: GridSpec) -> "JointDensity2":
        if grid == self.grid:
            return self
        stacked = embed_rows(np.vstack([self.q_plus, self.q_minus]), self.grid, grid)
        return JointDensity2(grid, stacked[0], stacked[1], self.t)

    def fit_light_cone(self, n_steps: int) -> "JointDensity2":
        """Re-grid so the occupied span plus ``n_steps`` nodes per side fits."""
        return self.on_grid(light_cone_grid(self.grid, self.rho, n_steps))

    def validate(self, expected_mass: float = 1.0, tol: float = MASS_TOLERANCE) -> None:
        """Raise ConservationError unless the density is a proper joint distribution."""
        lowest = min_entry(self)
        if lowest < -NEGATIVITY_TOLERANCE:
            raise ConservationError(f"negative joint mass {lowest:.3e} at t={self.t}")
        mass = total_mass(self)
        if abs(mass - expected_mass) > tol:
            raise ConservationError(
                f"total mass {mass:.17g} drifted from {expected_mass:.17g} at t={self.t}"
            )
        up, down = math.fsum(self.q_plus), math.fsum(self.q_minus)
        if up > 0.0 and down > 0.0 and (up >= 1.0 or down >= 1.0):
            raise ConservationError(f"velocity marginals ({up}, {down}) are not sub-normalized")


@dataclass(frozen=True, eq=False)
class StateDensity:
    """Position density rho and current phi of a two-velocity density."""

    grid: GridSpec
    rho: np.ndarray
    phi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rho", frozen_array(self.rho, "rho", 1))
        object.__setattr__(self, "phi", frozen_array(self.phi, "phi", 1))


def to_state_density(q: JointDensity2) -> StateDensity:
    return StateDensity(q.grid, q.rho, q.phi, q.t)


def _mass_array(q) -> np.ndarray:
    if hasattr(q, "as_array"):
        return q.as_array()
    return np.asarray(q, dtype=float)


def total_mass(q) -> float:
    """Exactly rounded sum of every joint entry (densities or raw arrays)."""
    return math.fsum(_mass_array(q).ravel())


def min_entry(q) -> float:
    values = _mass_array(q)
    if values.size == 0:
        return 0.0
    return float(values.min())


def gaussian_initial(grid: GridSpec, sigma: float, support_half_width: float) -> JointDensity2:
    """Truncated Gaussian split evenly between both velocities, renormalized to mass 1.

    Supported nodes are those with |m * dx| <= support_half_width (inclusive),
    so [-6.9, 6.9] at dx = 0.3 spans 47 nodes.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if support_half_width < 0:
        raise ValueError("support is empty: support_half_width must be nonnegative")
    half_nodes = math.floor(support_half_width / grid.dx + 1e-9)
    if -half_nodes < grid.m_min or half_nodes > grid.m_max:
        raise ValueError(
            f"support nodes [{-half_nodes}, {half_nodes}] fall outside grid [{grid.m_min}, {grid.m_max}]"
        )
    inside = np.abs(grid.nodes) <= half_nodes
    weights = np.where(inside, np.exp(-0.5 * (grid.x / sigma) ** 2), 0.0)
    norm = math.fsum(weights)
    if not norm > 0:
        raise ValueError("Gaussian weights vanish on the support; increase sigma")
    q = weights / (2.0 * norm)
    logger.debug("Gaussian initial density on %d nodes (sigma=%s)", int(inside.sum()), sigma)
    return JointDensity2(grid, q, q.copy(), 0.0)


def point_mass(grid: GridSpec, node: int = 0, velocity: int = 1) -> JointDensity2:
    """Unit mass at ``node`` moving up (velocity=+1) or down (velocity=-1)."""
    if velocity not in (1, -1):
        raise ValueError(f"velocity must be +1 or -1, got {velocity}")
    values = np.zeros(grid.n_nodes)
    values[grid.index_of(node)] = 1.0
    zeros = np.zeros(grid.n_nodes)
    if velocity == 1:
        return JointDensity2(grid, values, zeros)
    return JointDensity2(grid, zeros, values)


class RateForm(str, Enum):
    STEP_PROBABILITY = "step_probability"
    CONTINUUM_RATE = "continuum_rate"


def _evaluate(value: RateValue, t: float, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    raw = value(t, x) if callable(value) else value
    return np.broadcast_to(np.asarray(raw, dtype=float), x.shape)


@dataclass(frozen=True)
class RateSpec2:
    """Switching laws alpha (up to down) and beta (down to up) as constants or functions of (t, x)."""

    alpha: RateValue
    beta: RateValue
    form: RateForm = RateForm.STEP_PROBABILITY

    def __post_init__(self):
        object.__setattr__(self, "form", RateForm(self.form))
        if self.is_constant:
            self._check(np.asarray(self.alpha, dtype=float), np.asarray(self.beta, dtype=float))

    @classmethod
    def constant(cls, alpha: float, beta: float, form: RateForm = RateForm.STEP_PROBABILITY) -> "RateSpec2":
        return cls(float(alpha), float(beta), form)

    @property
    def is_constant(self) -> bool:
        return not (callable(self.alpha) or callable(self.beta))

    def _check(self, alpha: np.ndarray, beta: np.ndarray) -> None:
        for name, values in (("alpha", alpha), ("beta", beta)):
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{name} is not finite")
            if np.any(values < 0):
                raise ValueError(f"{name} must be nonnegative, got min {values.min()}")
            if self.form is RateForm.STEP_PROBABILITY and np.any(values > 1):
                raise ValueError(f"{name} step probability must lie in [0, 1], got max {values.max()}")

    def evaluate(self, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Raw (alpha, beta) in this rate specification's own form at time t and positions x."""
        alpha, beta = _evaluate(self.alpha, t, x), _evaluate(self.beta, t, x)
        self._check(alpha, beta)
        return alpha, beta

    def step_probabilities(self, t: float, x: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
        """Per-step switching probabilities; continuum rates are multiplied by h."""
        alpha, beta = self.evaluate(t, x)
        if self.form is RateForm.CONTINUUM_RATE:
            alpha, beta = alpha * h, beta * h
            for name, values in (("alpha*h", alpha), ("beta*h", beta)):
                if np.any(values > 1):
                    raise ValueError(f"{name} exceeds 1 (max {values.max()}); reduce the time step")
        return alpha, beta

    def gamma(self, t: float, x: np.ndarray) -> np.ndarray:
        alpha, beta = self.evaluate(t, x)
        return alpha + beta

    def epsilon(self, t: float, x: np.ndarray) -> np.ndarray:
        alpha, beta = self.evaluate(t, x)
        return alpha - beta


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Per-node velocity (or acceleration) values; entries outside ``valid_mask`` are zero."""

    v: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        v = np.where(self.valid_mask, np.asarray(self.v, dtype=float), 0.0)
        mask = np.array(self.valid_mask, dtype=bool)
        v.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid_mask", mask)


def masked_ratio(numerator: np.ndarray, rho: np.ndarray, rho_floor: float) -> Tuple[np.ndarray, np.ndarray]:
    """numerator / rho where rho >= rho_floor, zero elsewhere, plus the mask."""
    if not rho_floor > 0:
        raise ValueError(f"rho_floor must be positive, got {rho_floor}")
    mask = rho >= rho_floor
    safe = np.where(mask, rho, 1.0)
    return np.where(mask, numerator / safe, 0.0), mask


@dataclass(frozen=True, eq=False)
class MomentSeries:
    """Mean, variance and mean velocity of the position density per recorded time."""

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    mean_velocity: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("times", "mean", "variance", "mean_velocity"):
            arrays[name] = frozen_array(getattr(self, name), name, 1)
            object.__setattr__(self, name, arrays[name])
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise ValueError("moment arrays must share one length")
        if np.any(arrays["variance"] < 0):
            raise ValueError("variance must be nonnegative")

    def __len__(self) -> int:
        return self.times.shape[0]

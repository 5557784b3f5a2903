"""Continuum limit of the two-velocity walk.

For constant rates the pair (q+, q-) obeys

    q+_t + c q+_x = -alpha q+ + beta q-
    q-_t - c q-_x =  alpha q+ - beta q-

so rho = q+ + q- solves the damped telegraph equation
rho_tt + gamma rho_t = c^2 rho_xx + c eps rho_x, and the substitution
rho = exp(-eps x / (2c) - gamma t / 2) psi turns it into the Klein-Gordon
equation psi_tt = c^2 psi_xx + eta^2 psi with eta^2 = alpha * beta.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy import special
from scipy.integrate import simpson, trapezoid
from scipy.interpolate import CubicSpline, RectBivariateSpline

from src.lattice import JointDensity2, frozen_array

logger = logging.getLogger(__name__)

DEFAULT_N_QUAD = 4001
CHUNK_SIZE = 256
KERNELS = ("exact", "printed")


@dataclass(frozen=True)
class TelegraphParams:
    """Continuum switching rates (1/time) and speed c."""

    alpha: float
    beta: float
    c: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be a nonnegative rate, got {value}")
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"c must be positive, got {self.c}")

    @property
    def gamma(self) -> float:
        return self.alpha + self.beta

    @property
    def epsilon(self) -> float:
        return self.alpha - self.beta

    @property
    def eta(self) -> float:
        return math.sqrt(self.alpha * self.beta)

    def describe(self) -> Dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "c": self.c,
                "gamma": self.gamma, "epsilon": self.epsilon, "eta": self.eta}


def telegraph_params(alpha: float, beta: float, c: float) -> TelegraphParams:
    return TelegraphParams(float(alpha), float(beta), float(c))


def bessel_i0(z):
    """Modified Bessel function I0 for z >= 0."""
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < 0):
        raise ValueError("bessel_i0 is defined here for z >= 0")
    return special.i0(z)


def bessel_k0(z):
    """Modified Bessel function K0 for z > 0 (the second solution, unused by the Cauchy solver)."""
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr <= 0):
        raise ValueError("bessel_k0 requires z > 0")
    return special.k0(z)


@dataclass(frozen=True)
class LightconeKernel:
    """Interval c^2 t^2 - x^2 and its square root xi inside the light cone."""

    c: float

    def interval(self, t, x) -> np.ndarray:
        return self.c ** 2 * np.asarray(t, dtype=float) ** 2 - np.asarray(x, dtype=float) ** 2

    def inside(self, t, x) -> np.ndarray:
        return self.interval(t, x) > 0

    def xi(self, t, x) -> np.ndarray:
        """sqrt(c^2 t^2 - x^2) strictly inside the cone, NaN elsewhere."""
        interval = self.interval(t, x)
        return np.where(interval > 0, np.sqrt(np.maximum(interval, 0.0)), np.nan)

    def i0_field(self, eta: float, t, x) -> np.ndarray:
        """I0((eta / c) xi), a Klein-Gordon solution inside the cone."""
        return special.i0((eta / self.c) * self.xi(t, x))


@dataclass(frozen=True, eq=False)
class CauchyData:
    """Initial densities q+(0, x), q-(0, x) sampled on an increasing x grid.

    Values between samples come from cubic splines. Outside the sampled range
    the data is zero when ``zero_pad`` is set, and an error otherwise.
    """

    x: np.ndarray
    q_plus: np.ndarray
    q_minus: np.ndarray
    zero_pad: bool = True
    mass_tolerance: float = 1e-6

    def __post_init__(self):
        x = frozen_array(self.x, "x", 1)
        q_plus = frozen_array(self.q_plus, "q_plus", 1)
        q_minus = frozen_array(self.q_minus, "q_minus", 1)
        if q_plus.shape != x.shape or q_minus.shape != x.shape:
            raise ValueError("x, q_plus and q_minus must share one shape")
        if x.size < 4 or np.any(np.diff(x) <= 0):
            raise ValueError("x must be strictly increasing with at least 4 samples")
        if np.any(q_plus < 0) or np.any(q_minus < 0):
            raise ValueError("initial densities must be nonnegative")
        mass = trapezoid(q_plus + q_minus, x)
        if abs(mass - 1.0) > self.mass_tolerance:
            raise ValueError(f"initial densities integrate to {mass:.12g}, expected 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "q_plus", q_plus)
        object.__setattr__(self, "q_minus", q_minus)
        object.__setattr__(self, "_splines", {"plus": CubicSpline(x, q_plus), "minus": CubicSpline(x, q_minus)})

    @classmethod
    def gaussian(cls, sigma: float, support_half_width: float, n_samples: int = 4001,
                 mean: float = 0.0) -> "CauchyData":
        """Truncated Gaussian shared evenly by both velocities, normalized by the trapezoid rule."""
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        if not support_half_width > 0:
            raise ValueError("support_half_width must be positive")
        x = np.linspace(mean - support_half_width, mean + support_half_width, n_samples)
        weights = np.exp(-0.5 * ((x - mean) / sigma) ** 2)
        q = weights / (2.0 * trapezoid(weights, x))
        return cls(x, q, q.copy())

    @classmethod
    def from_samples(cls, x, q_plus, q_minus, zero_pad: bool = True) -> "CauchyData":
        return cls(np.asarray(x, float), np.asarray(q_plus, float), np.asarray(q_minus, float), zero_pad)

    def initial(self, which: str, points) -> np.ndarray:
        """q+(0, points) for which='plus', q-(0, points) for which='minus'."""
        points = np.asarray(points, dtype=float)
        lo, hi = self.x[0], self.x[-1]
        inside = (points >= lo) & (points <= hi)
        if not self.zero_pad and not np.all(inside):
            raise ValueError("x +- ct leaves the sampled support and zero padding is disabled")
        values = self._splines[which](np.clip(points, lo, hi))
        return np.where(inside, values, 0.0)

    def psi(self, which: str, points, p: TelegraphParams) -> np.ndarray:
        """Klein-Gordon initial data exp(eps x / (2c)) q(0, x)."""
        points = np.asarray(points, dtype=float)
        return np.exp(p.epsilon * points / (2.0 * p.c)) * self.initial(which, points)

    @property
    def mean(self) -> float:
        rho = self.q_plus + self.q_minus
        return float(trapezoid(self.x * rho, self.x) / trapezoid(rho, self.x))

    @property
    def variance(self) -> float:
        rho = self.q_plus + self.q_minus
        mass = trapezoid(rho, self.x)
        return float(trapezoid((self.x - self.mean) ** 2 * rho, self.x) / mass)


class CauchySolution(NamedTuple):
    q_plus: np.ndarray
    q_minus: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return self.q_plus + self.q_minus


def _exact_chunk(data: CauchyData, p: TelegraphParams, t: float, x: np.ndarray,
                 u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s, co = np.sin(u), np.cos(u)
    z = x[:, None] - p.c * t * s[None, :]
    arg = p.eta * t * co
    # i0e/i1e absorb exp(arg); the remaining exponent never exceeds zero
    weight = np.exp(arg - 0.5 * p.gamma * t - 0.5 * p.epsilon * t * s)
    i0w = special.i0e(arg) * weight
    i1w = special.i1e(arg) * weight
    up0 = data.initial("plus", z)
    down0 = data.initial("minus", z)
    half_eta_t = 0.5 * p.eta * t
    plus = simpson(up0 * (half_eta_t * i1w * (1.0 + s)) + down0 * (0.5 * p.beta * t * i0w * co), x=u, axis=1)
    minus = simpson(down0 * (half_eta_t * i1w * (1.0 - s)) + up0 * (0.5 * p.alpha * t * i0w * co), x=u, axis=1)
    plus += math.exp(-p.alpha * t) * data.initial("plus", x - p.c * t)
    minus += math.exp(-p.beta * t) * data.initial("minus", x + p.c * t)
    return plus, minus


def _printed_chunk(data: CauchyData, p: TelegraphParams, t: float, x: np.ndarray,
                   u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s, co = np.sin(u), np.cos(u)
    z = x[:, None] - p.c * t * s[None, :]
    arg = p.eta * t * co
    i0w = special.i0e(arg) * np.exp(arg - 0.5 * p.gamma * t - 0.5 * p.epsilon * t * s)
    weight = 0.5 * p.c * t * p.eta
    out = []
    for which in ("plus", "minus"):
        front = 0.5 * (math.exp(-p.alpha * t) * data.initial(which, x - p.c * t)
                       + math.exp(-p.beta * t) * data.initial(which, x + p.c * t))
        out.append(front + weight * simpson(data.initial(which, z) * i0w, x=u, axis=1))
    return out[0], out[1]


def kg_cauchy_q(data: CauchyData, p: TelegraphParams, t: float, x, kernel: str = "exact",
                n_quad: int = DEFAULT_N_QUAD, threads: int = 1) -> CauchySolution:
    """Evaluate q+(t, x) and q-(t, x) from the initial data.

    Integrals over the light cone [x - ct, x + ct] use z = x - ct sin(u), which
    removes the 1/xi endpoint singularity; the u integral is composite Simpson
    on ``n_quad`` points. ``kernel="exact"`` is the full Riemann-function
    solution of the first-order system. ``kernel="printed"`` drops the
    initial time-derivative term and keeps only the I0 kernel for both
    components; it is kept for diagnostics.

    Raises:
        ValueError: t < 0, an unknown kernel, or x +- ct outside unpadded data.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}, got {kernel!r}")
    if n_quad < 3 or n_quad % 2 == 0:
        raise ValueError("n_quad must be an odd integer >= 3")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if t == 0:
        return CauchySolution(data.initial("plus", x), data.initial("minus", x))

    u = np.linspace(-0.5 * math.pi, 0.5 * math.pi, n_quad)
    chunk_fn = _exact_chunk if kernel == "exact" else _printed_chunk
    chunks = [x[i:i + CHUNK_SIZE] for i in range(0, x.size, CHUNK_SIZE)]

    def evaluate(chunk):
        return chunk_fn(data, p, float(t), chunk, u)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(evaluate, chunks))
    else:
        results = [evaluate(chunk) for chunk in chunks]

    plus = np.concatenate([r[0] for r in results])
    minus = np.concatenate([r[1] for r in results])
    rho = plus + minus
    if rho.size and rho.min() < -1e-12 * max(rho.max(), 1.0):
        logger.warning("Cauchy solution (%s kernel) is negative at t=%g: min rho %.3e", kernel, t, rho.min())
    return CauchySolution(plus, minus)


def lattice_l1_distance(q: JointDensity2, data: CauchyData, p: TelegraphParams, kernel: str = "exact",
                        n_quad: int = DEFAULT_N_QUAD, threads: int = 1) -> float:
    """L1 distance between lattice rho / dx and the analytic rho at the lattice nodes."""
    analytic = kg_cauchy_q(data, p, q.t, q.grid.x, kernel=kernel, n_quad=n_quad, threads=threads)
    return math.fsum(np.abs(q.rho / q.grid.dx - analytic.rho)) * q.grid.dx


@dataclass(frozen=True, eq=False)
class SampledField:
    """Values of a field on a tensor grid: values[i, k] at (t[i], x[k])."""

    t: np.ndarray
    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = frozen_array(self.t, "t", 1)
        x = frozen_array(self.x, "x", 1)
        values = frozen_array(self.values, "values", 2)
        if values.shape != (t.size, x.size):
            raise ValueError(f"values must have shape {(t.size, x.size)}, got {values.shape}")
        for name, axis in (("t", t), ("x", x)):
            if axis.size > 1 and np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} samples must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", values)


def sample_field(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], t, x) -> SampledField:
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    grid_t, grid_x = np.meshgrid(t, x, indexing="ij")
    return SampledField(t, x, fn(grid_t, grid_x))


@dataclass(frozen=True)
class ResidualReport:
    norm_inf: float
    norm_l2: float
    dt: float
    dx: float

    def to_dict(self) -> Dict[str, float]:
        return {"norm_inf": self.norm_inf, "norm_l2": self.norm_l2, "dt": self.dt, "dx": self.dx}


def _uniform_step(axis: np.ndarray, name: str) -> float:
    if axis.size < 3:
        raise ValueError(f"grid too coarse: need at least 3 {name} samples, got {axis.size}")
    steps = np.diff(axis)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError(f"{name} samples must be uniformly spaced")
    return float(steps[0])


def _report(residual: np.ndarray, dt: float, dx: float) -> ResidualReport:
    return ResidualReport(float(np.abs(residual).max()), float(np.sqrt(np.sum(residual ** 2) * dt * dx)), dt, dx)


def _derivatives(field: SampledField) -> Tuple[Dict[str, np.ndarray], float, float]:
    dt = _uniform_step(field.t, "t")
    dx = _uniform_step(field.x, "x")
    v = field.values
    centre = v[1:-1, 1:-1]
    parts = {
        "f": centre,
        "t": (v[2:, 1:-1] - v[:-2, 1:-1]) / (2.0 * dt),
        "x": (v[1:-1, 2:] - v[1:-1, :-2]) / (2.0 * dx),
        "tt": (v[2:, 1:-1] - 2.0 * centre + v[:-2, 1:-1]) / dt ** 2,
        "xx": (v[1:-1, 2:] - 2.0 * centre + v[1:-1, :-2]) / dx ** 2,
    }
    return parts, dt, dx


def kg_residual(field: SampledField, p: TelegraphParams) -> ResidualReport:
    """Norms of psi_tt - c^2 psi_xx - eta^2 psi on interior points, by second central differences."""
    d, dt, dx = _derivatives(field)
    residual = d["tt"] - p.c ** 2 * d["xx"] - p.eta ** 2 * d["f"]
    return _report(residual, dt, dx)


def telegraph_residual(field: SampledField, p: TelegraphParams) -> ResidualReport:
    """Norms of rho_tt + gamma rho_t - c^2 rho_xx - c eps rho_x on interior points."""
    d, dt, dx = _derivatives(field)
    residual = d["tt"] + p.gamma * d["t"] - p.c ** 2 * d["xx"] - p.c * p.epsilon * d["x"]
    return _report(residual, dt, dx)


def rho_phi_residual(rho: SampledField, phi: SampledField, c: float) -> ResidualReport:
    """Norms of rho_t + c phi_x on interior points."""
    if rho.values.shape != phi.values.shape:
        raise ValueError("rho and phi must be sampled on the same grid")
    d_rho, dt, dx = _derivatives(rho)
    d_phi, _, _ = _derivatives(phi)
    return _report(d_rho["t"] + c * d_phi["x"], dt, dx)


def lorentz_boost_samples(field: SampledField, v: float, c: float, t_out=None, x_out=None) -> SampledField:
    """Resample psi*(t, x) = psi(g (t - x v / c^2), g (x - v t)) with g = 1 / sqrt(1 - v^2 / c^2).

    Interpolation is bicubic on the source grid; every boosted point must lie
    inside it.
    """
    if not abs(v) < c:
        raise ValueError(f"boost speed |v|={abs(v)} must be below c={c}")
    t_out = field.t if t_out is None else np.asarray(t_out, dtype=float)
    x_out = field.x if x_out is None else np.asarray(x_out, dtype=float)
    if v == 0 and np.array_equal(t_out, field.t) and np.array_equal(x_out, field.x):
        return SampledField(field.t, field.x, field.values)

    factor = 1.0 / math.sqrt(1.0 - (v / c) ** 2)
    grid_t, grid_x = np.meshgrid(t_out, x_out, indexing="ij")
    source_t = factor * (grid_t - grid_x * v / c ** 2)
    source_x = factor * (grid_x - v * grid_t)
    slack = 1e-12 * max(1.0, float(np.abs(field.t).max()), float(np.abs(field.x).max()))
    if (source_t.min() < field.t[0] - slack or source_t.max() > field.t[-1] + slack
            or source_x.min() < field.x[0] - slack or source_x.max() > field.x[-1] + slack):
        raise ValueError("boosted coordinates fall outside the sampled source field")
    spline = RectBivariateSpline(field.t, field.x, field.values, kx=3, ky=3)
    values = spline.ev(source_t.ravel(), source_x.ravel()).reshape(source_t.shape)
    return SampledField(t_out, x_out, values)


def diffusion_coefficients(p: TelegraphParams) -> Tuple[float, float]:
    """Drift -c eps / gamma and diffusivity c^2 / gamma of the diffusive limit."""
    if not p.gamma > 0:
        raise ValueError("diffusion limit needs gamma > 0")
    return -p.c * p.epsilon / p.gamma, p.c ** 2 / p.gamma


def diffusion_limit_density(p: TelegraphParams, mu0: float, s0_sq: float, t: float, x):
    """Gaussian with mean mu0 - (c eps / gamma) t and variance s0^2 + (2 c^2 / gamma) t."""
    drift, diffusivity = diffusion_coefficients(p)
    variance = s0_sq + 2.0 * diffusivity * t
    if not variance > 0:
        raise ValueError("diffusion limit variance must be positive")
    x = np.asarray(x, dtype=float)
    mean = mu0 + drift * t
    return np.exp(-0.5 * (x - mean) ** 2 / variance) / math.sqrt(2.0 * math.pi * variance)

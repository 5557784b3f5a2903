"""Empirical moments of lattice trajectories and the closed-form moment predictions."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Union

import numpy as np
import pandas as pd

from src.continuum import TelegraphParams
from src.lattice import MomentSeries, total_mass

logger = logging.getLogger(__name__)

ASYMPTOTIC_GAMMA_T = 5.0

MOMENT_COLUMNS = ["t", "mean", "variance", "mean_velocity", "predicted_velocity", "predicted_x2"]


def empirical_moments(trajectory) -> MomentSeries:
    """Mean, variance and mean velocity of every recorded snapshot.

    Works for two-velocity and multi-velocity trajectories alike; the mean
    velocity is the mass-weighted exit velocity of each snapshot.
    """
    snapshots = trajectory.snapshots
    if len(snapshots) == 0:
        raise ValueError("trajectory has no snapshots")
    x = trajectory.grid.x
    means, variances, velocities = [], [], []
    for snapshot in snapshots:
        rho = snapshot.rho
        mass = total_mass(snapshot)
        if mass == 0.0:
            raise ValueError(f"snapshot at t={snapshot.t} carries no mass")
        mean = math.fsum(x * rho) / mass
        means.append(mean)
        variances.append(max(math.fsum((x - mean) ** 2 * rho) / mass, 0.0))
        velocities.append(snapshot.mean_velocity())
    return MomentSeries(trajectory.times, np.array(means), np.array(variances), np.array(velocities))


@dataclass(frozen=True)
class MomentPrediction:
    """Closed-form mean velocity and moments for constant continuum rates."""

    v0: float
    gamma: float
    epsilon: float
    c: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"moment predictions need gamma > 0, got {self.gamma}")

    @classmethod
    def from_params(cls, p: TelegraphParams, v0: float) -> "MomentPrediction":
        return cls(float(v0), p.gamma, p.epsilon, p.c)

    @classmethod
    def from_initial(cls, q, p: TelegraphParams) -> "MomentPrediction":
        """Take v0 from the initial density's mean exit velocity."""
        return cls.from_params(p, q.mean_velocity())

    @property
    def v_inf(self) -> float:
        return -self.c * self.epsilon / self.gamma


Predictor = Union[MomentPrediction, TelegraphParams]


def predicted_mean_velocity(p: MomentPrediction, t):
    """v(t) = -c eps / gamma + (v0 + c eps / gamma) exp(-gamma t)."""
    t = np.asarray(t, dtype=float)
    return p.v_inf + (p.v0 - p.v_inf) * np.exp(-p.gamma * t)


def predicted_mean(p: MomentPrediction, ex0: float, t):
    """E[x(t)], the time integral of ``predicted_mean_velocity``."""
    t = np.asarray(t, dtype=float)
    return ex0 + p.v_inf * t + (p.v0 - p.v_inf) * (-np.expm1(-p.gamma * t)) / p.gamma


def _gamma(p: Predictor) -> float:
    if not p.gamma > 0:
        raise ValueError(f"moment predictions need gamma > 0, got {p.gamma}")
    return p.gamma


def predicted_second_moment(p: Predictor, ex0: float, t):
    """E[x^2(t)] ~ 2 c^2 t / gamma + (E[x(0)] - c eps t / gamma)^2, valid for gamma t >> 1."""
    gamma = _gamma(p)
    t = np.asarray(t, dtype=float)
    return 2.0 * p.c ** 2 * t / gamma + (ex0 - p.c * p.epsilon * t / gamma) ** 2


def regime_flags(p: Predictor, t: float) -> Dict[str, object]:
    gamma = _gamma(p)
    return {"gamma": gamma, "gamma_t": gamma * t, "approximate": gamma * t < ASYMPTOTIC_GAMMA_T}


def variance_slope(series: MomentSeries, fraction: float = 0.5) -> float:
    """Least-squares slope of the variance over the final ``fraction`` of the run."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    start = int(math.floor(len(series) * (1.0 - fraction)))
    times, variance = series.times[start:], series.variance[start:]
    if times.size < 2:
        raise ValueError("need at least two points to fit a variance slope")
    slope, _ = np.polyfit(times, variance, 1)
    return float(slope)


def moment_table(series: MomentSeries, prediction: MomentPrediction, ex0: float) -> pd.DataFrame:
    return pd.DataFrame({
        "t": series.times,
        "mean": series.mean,
        "variance": series.variance,
        "mean_velocity": series.mean_velocity,
        "predicted_velocity": predicted_mean_velocity(prediction, series.times),
        "predicted_x2": predicted_second_moment(prediction, ex0, series.times),
    }, columns=MOMENT_COLUMNS)

"""Preset experiments driven by pipeline.py.

Each command builds its inputs from an ExperimentConfig, runs the relevant
solver, writes CSV/JSON artifacts and returns a summary dict that is also
written to ``summary.json``.
"""

import logging
import math
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.artifact_writer import ArtifactWriter
from src.binomial import BinomialTrajectory, ballistic_lobe_masses, parity_class_masses, simulate
from src.config_loader import ExperimentConfig
from src.continuum import (
    CauchyData,
    TelegraphParams,
    kg_cauchy_q,
    lattice_l1_distance,
    rho_phi_residual,
    sample_field,
    telegraph_params,
    telegraph_residual,
)
from src.lattice import (
    GridSpec,
    JointDensity2,
    RateForm,
    RateSpec2,
    gaussian_initial,
    make_grid,
    min_entry,
    occupied_span,
    total_mass,
)
from src.moments import (
    MomentPrediction,
    empirical_moments,
    moment_table,
    regime_flags,
    variance_slope,
)
from src.multinomial import (
    EDGE_OCCUPANCY_LIMIT,
    MultiDensity,
    MultiTrajectory,
    NewtonRates,
    RateMatrix,
    build_newton_rate_matrix,
    energy_check,
    inadmissible_mass,
    newton_check,
    newton_rate_field,
    rate_to_step,
    simulate_multinomial,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "analytic", "compare", "moments", "newton", "energy")
DEFAULT_PRESETS = {
    "simulate": "example1",
    "analytic": "analytic-compare",
    "compare": "analytic-compare",
    "moments": "example1",
    "newton": "newton",
    "energy": "energy",
}


def initial_grid(dx: float, dt: float, support_half_width: float) -> GridSpec:
    half = math.floor(support_half_width / dx + 1e-9)
    return make_grid(dx, dt, -half, half)


def build_initial(config: ExperimentConfig, refinement: int = 1) -> JointDensity2:
    """Initial two-velocity density for a (possibly refined) configuration."""
    grid = initial_grid(config.grid.dx / refinement, config.grid.dt / refinement, config.support_half_width)
    if config.initial == "point":
        values = np.zeros(grid.n_nodes)
        values[grid.index_of(0)] = 0.5
        return JointDensity2(grid, values, values.copy())
    return gaussian_initial(grid, config.sigma, config.support_half_width)


def build_rates(config: ExperimentConfig) -> RateSpec2:
    return RateSpec2.constant(config.rates.alpha, config.rates.beta, RateForm(config.rates.form))


def continuum_params(config: ExperimentConfig) -> TelegraphParams:
    """Continuum rates behind the configured lattice: step probabilities divided by dt."""
    alpha, beta = config.rates.alpha, config.rates.beta
    if config.rates.form == RateForm.STEP_PROBABILITY.value:
        alpha, beta = alpha / config.grid.dt, beta / config.grid.dt
    return telegraph_params(alpha, beta, config.grid.dx / config.grid.dt)


def build_newton(config: ExperimentConfig) -> Tuple[NewtonRates, RateMatrix, MultiDensity]:
    """Newton rates, their step matrix and an initial density resting at j = 0.

    The Gaussian is centred on the node nearest ``newton.x0``. Harmonic runs use
    the clipped rate field, so the curvature is limited only by where the mass
    goes: k |x| < 2 c theta on every occupied node.
    """
    settings = config.newton
    c = config.grid.dx / config.grid.dt
    if settings.potential == "harmonic":
        nr = NewtonRates.harmonic(settings.theta, settings.curvature, c)
        generator = newton_rate_field(nr, settings.j_max, clip=True)
    else:
        gradient = settings.gradient if settings.potential == "linear" else 0.0
        nr = NewtonRates.linear(settings.theta, gradient, c)
        generator = build_newton_rate_matrix(nr, settings.j_max, 0.0)
    omega_step = rate_to_step(generator, config.grid.dt)

    centred = initial_grid(config.grid.dx, config.grid.dt, config.support_half_width)
    profile = gaussian_initial(centred, config.sigma, config.support_half_width).rho
    offset = int(round(settings.x0 / config.grid.dx))
    grid = make_grid(centred.dx, centred.dt, centred.m_min + offset, centred.m_max + offset)
    weights = np.zeros(2 * settings.j_max + 1)
    weights[settings.j_max] = 1.0
    initial = MultiDensity.from_profile(grid, settings.j_max, profile, weights)
    return nr, omega_step, initial


def _check_admissible(trajectory: MultiTrajectory, nr: NewtonRates) -> None:
    stray = inadmissible_mass(trajectory, nr)
    if stray > EDGE_OCCUPANCY_LIMIT:
        raise ValueError(
            f"rate negativity: {stray:.3e} of the mass reaches nodes where |V'/(2c)| >= theta={nr.theta}; "
            "raise theta or reduce the curvature"
        )


def _validate_trajectory(trajectory) -> Tuple[float, float]:
    """Raise ConservationError on any bad snapshot; return (max mass drift, min entry)."""
    reference = total_mass(trajectory.snapshots[0])
    worst = 0.0
    lowest = math.inf
    for snapshot in trajectory.snapshots:
        snapshot.validate(expected_mass=reference)
        worst = max(worst, abs(total_mass(snapshot) - reference))
        lowest = min(lowest, min_entry(snapshot))
    return worst, lowest


class ExperimentRunner:
    """Runs one command of the experiment pipeline for a validated configuration."""

    def __init__(self, config: ExperimentConfig, writer: Optional[ArtifactWriter] = None):
        self.config = config
        self.writer = writer or ArtifactWriter(config.output_dir)
        self.artifacts: List[str] = []

    def run(self, command: str) -> Dict[str, object]:
        handlers: Dict[str, Callable[[], Dict[str, object]]] = {
            "simulate": self.simulate,
            "analytic": self.analytic,
            "compare": self.compare,
            "moments": self.moments,
            "newton": self.newton,
            "energy": self.energy,
        }
        if command not in handlers:
            raise ValueError(f"unknown command {command!r}; expected one of {COMMANDS}")

        started = time.perf_counter()
        details = handlers[command]()
        summary = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "preset": self.config.preset,
            **details,
            "wall_time_s": time.perf_counter() - started,
        }
        self._save_json(summary, "summary.json")
        summary["artifacts"] = list(self.artifacts)
        return summary

    def _save_frame(self, frame: pd.DataFrame, name: str) -> None:
        self.artifacts.append(self.writer.save_frame(frame, name))

    def _save_json(self, payload, name: str) -> None:
        self.artifacts.append(self.writer.save_json(payload, name))

    @property
    def _keep_every(self) -> int:
        return 1 if self.config.dump_all else self.config.dump_interval

    def _manifest(self) -> Dict[str, object]:
        cfg = self.config
        manifest = {
            "preset": cfg.preset,
            "dx": cfg.grid.dx,
            "dt": cfg.grid.dt,
            "c": cfg.grid.dx / cfg.grid.dt,
            "n_steps": cfg.n_steps,
            "sigma": cfg.sigma,
            "alpha": cfg.rates.alpha,
            "beta": cfg.rates.beta,
        }
        if cfg.is_multinomial:
            manifest["newton"] = cfg.newton.model_dump()
        return manifest

    def _write_snapshots(self, trajectory) -> None:
        for step, snapshot in zip(trajectory.steps, trajectory.snapshots):
            if isinstance(snapshot, MultiDensity):
                frame = ArtifactWriter.multi_density_frame(snapshot)
            else:
                frame = ArtifactWriter.joint_density_frame(snapshot)
            self._save_frame(frame, f"snapshots/snapshot_{step:06d}.csv")

    def _moments_frame(self, trajectory) -> Tuple[pd.DataFrame, Optional[MomentPrediction]]:
        series = empirical_moments(trajectory)
        initial = trajectory.snapshots[0]
        if self.config.is_multinomial:
            prediction = None
        else:
            p = continuum_params(self.config)
            prediction = MomentPrediction.from_initial(initial, p) if p.gamma > 0 else None
        if prediction is None:
            frame = pd.DataFrame({
                "t": series.times, "mean": series.mean, "variance": series.variance,
                "mean_velocity": series.mean_velocity,
                "predicted_velocity": np.nan, "predicted_x2": np.nan,
            })
        else:
            frame = moment_table(series, prediction, float(series.mean[0]))
        return frame, prediction

    def _run_lattice(self, keep_every: int):
        cfg = self.config
        if cfg.is_multinomial:
            nr, omega_step, initial = build_newton(cfg)
            trajectory = simulate_multinomial(initial, omega_step, cfg.n_steps, keep_every=keep_every)
            _check_admissible(trajectory, nr)
            return trajectory
        return simulate(build_initial(cfg), build_rates(cfg), cfg.n_steps, keep_every=keep_every)

    def simulate(self) -> Dict[str, object]:
        print(f"Simulating preset '{self.config.preset}' for {self.config.n_steps} steps")
        trajectory = self._run_lattice(self._keep_every)
        drift, lowest = _validate_trajectory(trajectory)

        self._write_snapshots(trajectory)
        self._save_json(self._manifest(), "manifest.json")
        frame, _ = self._moments_frame(trajectory)
        self._save_frame(frame, "moments.csv")

        final = trajectory.final
        span = occupied_span(final.grid, final.rho)
        summary: Dict[str, object] = {
            "n_steps": self.config.n_steps,
            "final_mean": float(frame["mean"].iloc[-1]),
            "final_variance": float(frame["variance"].iloc[-1]),
            "conservation_error": drift,
            "min_entry": lowest,
            "support": None if span is None else [span[0] * final.grid.dx, span[1] * final.grid.dx],
        }
        if isinstance(trajectory, MultiTrajectory):
            summary["max_edge_occupancy"] = trajectory.max_edge_occupancy
            summary["truncation_flagged"] = trajectory.truncation_flagged
        else:
            up, down = ballistic_lobe_masses(trajectory.snapshots[0], trajectory.rates, self.config.n_steps)
            summary["lobe_masses"] = {"up": up, "down": down}
            even, odd = parity_class_masses(final, self.config.n_steps)
            summary["parity_masses"] = {"even": even, "odd": odd}
        return summary

    def moments(self) -> Dict[str, object]:
        if self.config.is_multinomial:
            raise ValueError("the moments command runs two-velocity presets only")
        print(f"Computing moments for preset '{self.config.preset}'")
        trajectory: BinomialTrajectory = self._run_lattice(keep_every=1)
        _validate_trajectory(trajectory)
        frame, prediction = self._moments_frame(trajectory)
        self._save_frame(frame, "moments.csv")

        series = empirical_moments(trajectory)
        t_final = float(series.times[-1])
        summary: Dict[str, object] = {
            "final_mean": float(series.mean[-1]),
            "final_variance": float(series.variance[-1]),
            "final_mean_velocity": float(series.mean_velocity[-1]),
        }
        if len(series) >= 4:
            summary["variance_slope"] = variance_slope(series)
        if prediction is not None:
            summary["predicted_v_inf"] = prediction.v_inf
            summary["predicted_variance_slope"] = 2.0 * prediction.c ** 2 / prediction.gamma
            summary["regime"] = regime_flags(prediction, t_final)
        return summary

    def analytic(self) -> Dict[str, object]:
        cfg = self.config
        if cfg.is_multinomial:
            raise ValueError("the analytic command needs a two-velocity preset")
        p = continuum_params(cfg)
        data = CauchyData.gaussian(cfg.sigma, cfg.support_half_width, cfg.analytic.n_samples)
        t_final = cfg.n_steps * cfg.grid.dt
        grid = build_initial(cfg).grid.widened(cfg.n_steps)
        print(f"Evaluating the {cfg.analytic.kernel} Cauchy solution at t={t_final:g} on {grid.n_nodes} points")

        solution = kg_cauchy_q(data, p, t_final, grid.x, kernel=cfg.analytic.kernel,
                               n_quad=cfg.analytic.n_quad, threads=cfg.threads)
        self._save_frame(ArtifactWriter.analytic_frame(t_final, grid.x, solution.q_plus, solution.q_minus),
                         "analytic.csv")
        mass = math.fsum(solution.rho) * grid.dx
        summary: Dict[str, object] = {"t": t_final, "params": p.describe(), "mass": mass,
                                      "min_rho": float(solution.rho.min())}

        if cfg.n_steps >= 4:
            times = t_final - cfg.grid.dt * np.arange(4, -1, -1)
            x = grid.x[::2]
            rows = [kg_cauchy_q(data, p, t, x, kernel=cfg.analytic.kernel, n_quad=cfg.analytic.n_quad,
                                threads=cfg.threads) for t in times]
            rho = sample_field(lambda tt, xx: np.array([r.rho for r in rows]), times, x)
            phi = sample_field(lambda tt, xx: np.array([r.q_plus - r.q_minus for r in rows]), times, x)
            residual = telegraph_residual(rho, p)
            self._save_json(residual.to_dict(), "residual.json")
            summary["telegraph_residual"] = residual.to_dict()
            summary["continuity_residual"] = rho_phi_residual(rho, phi, p.c).to_dict()
        return summary

    def compare(self) -> Dict[str, object]:
        cfg = self.config
        if cfg.is_multinomial:
            raise ValueError("the compare command needs a two-velocity preset")
        p = continuum_params(cfg)
        data = CauchyData.gaussian(cfg.sigma, cfg.support_half_width, cfg.analytic.n_samples)
        rates = RateSpec2.constant(p.alpha, p.beta, RateForm.CONTINUUM_RATE)

        rows = []
        finest: Optional[JointDensity2] = None
        for refinement in cfg.analytic.refinements:
            n_steps = cfg.n_steps * refinement
            print(f"Refinement x{refinement}: {n_steps} steps at dx={cfg.grid.dx / refinement:g}")
            initial = build_initial(cfg, refinement)
            final = simulate(initial, rates, n_steps, keep_every=max(n_steps, 1)).final
            rows.append({
                "refinement": refinement,
                "dx": final.grid.dx,
                "dt": final.grid.dt,
                "n_steps": n_steps,
                "l1_exact": lattice_l1_distance(final, data, p, "exact", cfg.analytic.n_quad, cfg.threads),
                "l1_printed": lattice_l1_distance(final, data, p, "printed", cfg.analytic.n_quad, cfg.threads),
            })
            finest = final

        orders = []
        for coarse, fine in zip(rows, rows[1:]):
            ratio = fine["refinement"] / coarse["refinement"]
            if coarse["l1_exact"] > 0 and fine["l1_exact"] > 0 and ratio > 1:
                orders.append(math.log(coarse["l1_exact"] / fine["l1_exact"]) / math.log(ratio))

        start = kg_cauchy_q(data, p, 0.0, data.x)
        t0_error = float(max(np.abs(start.q_plus - data.q_plus).max(), np.abs(start.q_minus - data.q_minus).max()))

        analytic = kg_cauchy_q(data, p, finest.t, finest.grid.x, n_quad=cfg.analytic.n_quad, threads=cfg.threads)
        self._save_frame(ArtifactWriter.analytic_frame(finest.t, finest.grid.x, analytic.q_plus, analytic.q_minus),
                         "analytic.csv")
        self._save_frame(ArtifactWriter.joint_density_frame(finest), "lattice_final.csv")
        report = {"params": p.describe(), "t": finest.t, "refinements": rows, "orders": orders,
                  "t0_max_error": t0_error}
        self._save_json(report, "refinement.json")
        return {"refinements": rows, "orders": orders, "t0_max_error": t0_error,
                "final_l1": rows[-1]["l1_exact"]}

    def _newton_run(self) -> Tuple[NewtonRates, MultiTrajectory]:
        cfg = self.config
        if not cfg.is_multinomial:
            raise ValueError("newton and energy commands need the newton or energy preset")
        nr, omega_step, initial = build_newton(cfg)
        trajectory = simulate_multinomial(initial, omega_step, cfg.n_steps, keep_every=1)
        _check_admissible(trajectory, nr)
        _validate_trajectory(trajectory)
        return nr, trajectory

    def newton(self) -> Dict[str, object]:
        print(f"Newton check: theta={self.config.newton.theta}, potential={self.config.newton.potential}")
        nr, trajectory = self._newton_run()
        report = newton_check(trajectory, nr)
        middle = report.middle_half()
        gradient = np.abs(report.mean_gradient[middle])
        with np.errstate(divide="ignore", invalid="ignore"):
            magnitude_error = np.where(gradient > 0, np.abs(np.abs(report.d2_mean[middle]) - gradient) / gradient,
                                       np.nan)
        resolved = report.observed_sign != 0 and np.any(np.isfinite(magnitude_error))
        worst = float(np.nanmax(magnitude_error)) if resolved else None
        self._save_json({"observed_sign": report.observed_sign, "records": report.to_records()}, "newton.json")
        return {
            "observed_sign": report.observed_sign,
            "max_magnitude_error_middle_half": worst,
            "max_abs_d2_middle_half": float(np.abs(report.d2_mean[middle]).max()),
            "max_edge_occupancy": trajectory.max_edge_occupancy,
            "truncation_flagged": trajectory.truncation_flagged,
        }

    def energy(self) -> Dict[str, object]:
        print(f"Energy check: theta={self.config.newton.theta}, potential={self.config.newton.potential}")
        nr, trajectory = self._newton_run()
        report = energy_check(trajectory, nr)
        self._save_json({"expected_drift": report.expected_drift, "records": report.to_records()}, "energy.json")
        return {
            "expected_drift": report.expected_drift,
            "mean_drift": float(np.mean(report.drift)),
            "max_relative_error": float(np.abs(report.relative_error).max()),
            "max_edge_occupancy": trajectory.max_edge_occupancy,
            "truncation_flagged": trajectory.truncation_flagged,
        }

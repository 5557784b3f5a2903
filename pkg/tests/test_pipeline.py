"""End-to-end runs of the command-line pipeline."""

import json
from pathlib import Path

import pandas as pd
import pytest

import pipeline
from src.lattice import ConservationError, gaussian_initial, make_grid


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("PATH_DIFFUSION_OUTPUT_DIR", "PATH_DIFFUSION_DUMP_INTERVAL",
                 "PATH_DIFFUSION_THREADS", "PATH_DIFFUSION_N_QUAD"):
        monkeypatch.delenv(name, raising=False)


def run(*argv):
    return pipeline.main(list(argv))


def load_summary(directory: Path):
    return json.loads((directory / "summary.json").read_text(encoding="utf-8"))


def last_error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


class TestSimulate:
    """The simulate command on the built-in presets."""

    def test_example1(self, tmp_path):
        assert run("simulate", "example1", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["schema_version"] == 1
        assert summary["preset"] == "example1"
        assert summary["support"] == pytest.approx([-51.9, 51.9], abs=1e-9)
        assert summary["conservation_error"] <= 1e-12
        assert summary["min_entry"] >= 0.0
        assert summary["lobe_masses"]["up"] == pytest.approx(0.5 * 0.994 ** 149, abs=1e-10)
        assert summary["final_mean"] == pytest.approx(0.0, abs=1e-12)

        snapshots = sorted((tmp_path / "snapshots").glob("snapshot_*.csv"))
        assert len(snapshots) == 16
        assert snapshots[-1].name == "snapshot_000150.csv"
        assert (tmp_path / "manifest.json").exists()
        moments = pd.read_csv(tmp_path / "moments.csv")
        assert len(moments) == 16

    def test_runs_are_byte_identical(self, tmp_path):
        for name in ("first", "second"):
            assert run("simulate", "example2", "--output-dir", str(tmp_path / name), "--dump-interval", "50") == 0
        first = sorted((tmp_path / "first").rglob("*.csv"))
        assert first
        for path in first:
            twin = tmp_path / "second" / path.relative_to(tmp_path / "first")
            assert path.read_bytes() == twin.read_bytes()

    def test_zero_steps_reproduce_initial_density(self, tmp_path):
        assert run("simulate", "custom", "--n-steps", "0", "--output-dir", str(tmp_path)) == 0
        snapshots = list((tmp_path / "snapshots").glob("*.csv"))
        assert [p.name for p in snapshots] == ["snapshot_000000.csv"]
        frame = pd.read_csv(snapshots[0], float_precision="round_trip")
        expected = gaussian_initial(make_grid(0.3, 0.003, -23, 23), 0.6, 6.9)
        assert frame["q_plus"].tolist() == expected.q_plus.tolist()
        assert frame["q_minus"].tolist() == expected.q_minus.tolist()

    def test_point_initial_parity(self, tmp_path):
        assert run("simulate", "custom", "--initial", "point", "--n-steps", "7", "--output-dir", str(tmp_path)) == 0
        parity = load_summary(tmp_path)["parity_masses"]
        assert parity["odd"] == 0.0
        assert parity["even"] == pytest.approx(1.0, abs=1e-12)

    def test_example4_with_explicit_rates(self, tmp_path):
        code = run("simulate", "example4", "--alpha", "0.02", "--beta", "0.01", "--output-dir", str(tmp_path))
        assert code == 0
        assert load_summary(tmp_path)["final_mean"] < 0.0


class TestFailures:
    """Exit codes and the JSON error line."""

    def test_example4_without_rates(self, tmp_path, capsys):
        assert run("simulate", "example4", "--output-dir", str(tmp_path)) == 2
        error = last_error(capsys)
        assert error["error"] == "ConfigError"
        assert error["exit_code"] == 2
        assert "alpha" in error["message"]

    def test_unknown_preset(self, tmp_path, capsys):
        assert run("simulate", "example9", "--output-dir", str(tmp_path)) == 2
        assert "unknown preset" in last_error(capsys)["message"]

    def test_invalid_rates(self, tmp_path, capsys):
        assert run("simulate", "custom", "--alpha", "1.5", "--output-dir", str(tmp_path)) == 2
        assert last_error(capsys)["exit_code"] == 2

    def test_command_preset_mismatch(self, tmp_path, capsys):
        assert run("moments", "newton", "--output-dir", str(tmp_path)) == 2
        assert "two-velocity" in last_error(capsys)["message"]

    def test_conservation_failure(self, tmp_path, capsys, monkeypatch):
        def broken(self, command):
            raise ConservationError("total mass drifted")

        monkeypatch.setattr(pipeline.ExperimentRunner, "run", broken)
        assert run("simulate", "--output-dir", str(tmp_path)) == 3
        error = last_error(capsys)
        assert error == {"error": "ConservationError", "message": "total mass drifted", "exit_code": 3}


class TestOtherCommands:
    """Moments, continuum and multi-velocity commands."""

    def test_moments(self, tmp_path):
        assert run("moments", "example3", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["regime"]["gamma"] == pytest.approx(10.0)
        assert summary["final_mean"] == pytest.approx(0.0, abs=1e-12)
        assert len(pd.read_csv(tmp_path / "moments.csv")) == 151

    def test_analytic(self, tmp_path):
        assert run("analytic", "--n-quad", "1001", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["mass"] == pytest.approx(1.0, abs=1e-2)
        frame = pd.read_csv(tmp_path / "analytic.csv")
        assert list(frame.columns) == ["t", "x", "q_plus", "q_minus", "rho"]
        residual = json.loads((tmp_path / "residual.json").read_text(encoding="utf-8"))
        assert set(residual) == {"norm_inf", "norm_l2", "dt", "dx"}

    def test_compare(self, tmp_path):
        assert run("compare", "--output-dir", str(tmp_path)) == 0
        report = json.loads((tmp_path / "refinement.json").read_text(encoding="utf-8"))
        distances = [row["l1_exact"] for row in report["refinements"]]
        assert [row["refinement"] for row in report["refinements"]] == [1, 2, 4]
        assert distances[0] > distances[1] > distances[2]
        assert all(order > 0 for order in report["orders"])
        assert report["t0_max_error"] < 1e-12
        assert (tmp_path / "lattice_final.csv").exists()

    def test_newton(self, tmp_path):
        assert run("newton", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["observed_sign"] == -1
        assert summary["max_magnitude_error_middle_half"] < 0.03
        records = json.loads((tmp_path / "newton.json").read_text(encoding="utf-8"))["records"]
        assert set(records[0]) == {"t", "d2Ex_dt2", "E_Vprime"}

    def test_energy(self, tmp_path):
        assert run("energy", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["expected_drift"] == pytest.approx(100.0)
        assert summary["mean_drift"] == pytest.approx(100.0, rel=0.05)

    @pytest.mark.parametrize("preset", ["newton", "energy"])
    def test_multi_velocity_presets_conserve_mass(self, tmp_path, preset):
        assert run("simulate", preset, "--dump-interval", "50", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["n_steps"] == 150
        assert summary["conservation_error"] <= 1e-12
        assert summary["min_entry"] >= 0.0

    def test_harmonic_newton_off_centre(self, tmp_path):
        args = ("--potential", "harmonic", "--curvature", "1", "--x0", "2", "--theta", "4",
                "--j-max", "12", "--n-steps", "100")
        assert run("newton", *args, "--output-dir", str(tmp_path / "newton")) == 0
        summary = load_summary(tmp_path / "newton")
        assert summary["observed_sign"] == -1
        assert summary["max_magnitude_error_middle_half"] < 1e-3

        assert run("energy", *args, "--output-dir", str(tmp_path / "energy")) == 0
        summary = load_summary(tmp_path / "energy")
        assert summary["expected_drift"] == pytest.approx(400.0)
        assert summary["mean_drift"] == pytest.approx(400.0, rel=0.01)

    def test_centred_harmonic_run_is_accepted(self, tmp_path):
        # the widened grid reaches |x| > 40 where k = 0.5 would make beta negative
        assert run("newton", "--potential", "harmonic", "--curvature", "0.5", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["observed_sign"] == 0
        assert summary["max_magnitude_error_middle_half"] is None

    def test_mass_beyond_rate_limit_fails(self, tmp_path, capsys):
        code = run("newton", "--potential", "harmonic", "--curvature", "3", "--output-dir", str(tmp_path))
        assert code == 2
        assert "rate negativity" in last_error(capsys)["message"]

    def test_multi_velocity_simulate(self, tmp_path):
        assert run("simulate", "newton", "--n-steps", "20", "--output-dir", str(tmp_path)) == 0
        summary = load_summary(tmp_path)
        assert summary["truncation_flagged"] is False
        first = pd.read_csv(tmp_path / "snapshots" / "snapshot_000000.csv")
        assert list(first.columns) == ["t", "j", "v_j", "node_index", "x", "q"]

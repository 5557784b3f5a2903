import sys
import json
import logging
import argparse
from typing import Dict, List, Optional

from dotenv import load_dotenv
from src.config_loader import ConfigError, ExperimentSettings
from src.experiments import COMMANDS, DEFAULT_PRESETS, ExperimentRunner
from src.lattice import ConservationError

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_INVARIANT_VIOLATION = 3

COMMAND_HELP = {
    "simulate": "Run a lattice preset and dump snapshots, moments and a summary",
    "analytic": "Evaluate the continuum Cauchy solution at the preset's final time",
    "compare": "Refinement study of lattice density against the continuum solution",
    "moments": "Empirical moments against the closed-form predictions",
    "newton": "Check Newton's equation on a multi-velocity run",
    "energy": "Check the energy drift on a multi-velocity run",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Velocity-Markov lattice experiments')
    subparsers = parser.add_subparsers(dest='command', required=True)

    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=COMMAND_HELP[command])
        sub.add_argument('preset', nargs='?', default=None,
                         help=f"Experiment preset (default: {DEFAULT_PRESETS[command]})")
        sub.add_argument('--config', type=str, default=None, help='YAML or JSON config file')
        sub.add_argument('--output-dir', type=str, default=None, help='Directory for artifacts')
        sub.add_argument('--dump-interval', type=int, default=None, help='Steps between snapshot files')
        sub.add_argument('--dump-all', action='store_true', help='Write a snapshot for every step')
        sub.add_argument('--threads', type=int, default=None, help='Worker threads for analytic evaluation')
        sub.add_argument('--n-steps', type=int, default=None, help='Number of lattice steps')
        sub.add_argument('--alpha', type=float, default=None, help='Up-to-down switching probability or rate')
        sub.add_argument('--beta', type=float, default=None, help='Down-to-up switching probability or rate')
        sub.add_argument('--rate-form', choices=['step_probability', 'continuum_rate'], default=None,
                         help='Interpretation of --alpha/--beta')
        sub.add_argument('--sigma', type=float, default=None, help='Initial Gaussian standard deviation')
        sub.add_argument('--support-half-width', type=float, default=None, help='Initial support half width')
        sub.add_argument('--initial', choices=['gaussian', 'point'], default=None, help='Initial density shape')
        sub.add_argument('--theta', type=float, default=None, help='Base switching rate for Newton runs')
        sub.add_argument('--potential', choices=['linear', 'harmonic', 'free'], default=None,
                         help='Potential for Newton runs')
        sub.add_argument('--gradient', type=float, default=None, help="Constant V' of the linear potential")
        sub.add_argument('--curvature', type=float, default=None, help='K of the harmonic potential')
        sub.add_argument('--j-max', type=int, default=None, help='Largest velocity index for Newton runs')
        sub.add_argument('--x0', type=float, default=None, help='Centre of the initial Gaussian for Newton runs')
        sub.add_argument('--kernel', choices=['exact', 'printed'], default=None, help='Cauchy kernel')
        sub.add_argument('--n-quad', type=int, default=None, help='Light-cone quadrature points (odd)')
        sub.add_argument('--verbose', action='store_true', help='Debug logging')

    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, object]:
    """Map command-line flags onto dot-paths of the experiment config."""
    return {
        "output_dir": args.output_dir,
        "dump_interval": args.dump_interval,
        "dump_all": True if args.dump_all else None,
        "threads": args.threads,
        "n_steps": args.n_steps,
        "rates.alpha": args.alpha,
        "rates.beta": args.beta,
        "rates.form": args.rate_form,
        "sigma": args.sigma,
        "support_half_width": args.support_half_width,
        "initial": args.initial,
        "newton.theta": args.theta,
        "newton.potential": args.potential,
        "newton.gradient": args.gradient,
        "newton.curvature": args.curvature,
        "newton.j_max": args.j_max,
        "newton.x0": args.x0,
        "analytic.kernel": args.kernel,
        "analytic.n_quad": args.n_quad,
    }


def report_failure(error: Exception, exit_code: int) -> int:
    payload = {"error": type(error).__name__, "message": str(error), "exit_code": exit_code}
    sys.stderr.write(json.dumps(payload) + "\n")
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    load_dotenv()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s [%(name)s:%(lineno)s] %(levelname)s: %(message)s',
    )

    preset = args.preset or DEFAULT_PRESETS[args.command]
    print(f"\n=== Step 1: Loading configuration for preset '{preset}' ===")
    try:
        settings = ExperimentSettings(args.config)
        config = settings.build(preset, collect_overrides(args))
    except ConfigError as e:
        return report_failure(e, EXIT_CONFIG_ERROR)

    print(f"\n=== Step 2: Running '{args.command}' ===")
    try:
        summary = ExperimentRunner(config).run(args.command)
    except ConservationError as e:
        return report_failure(e, EXIT_INVARIANT_VIOLATION)
    except ValueError as e:
        return report_failure(e, EXIT_CONFIG_ERROR)

    print(f"\n=== Pipeline Complete ===")
    for key in ("final_mean", "final_variance", "conservation_error", "final_l1", "observed_sign",
                "mean_drift", "wall_time_s"):
        if key in summary:
            print(f"{key}: {summary[key]}")
    print(f"Artifacts written to: {config.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

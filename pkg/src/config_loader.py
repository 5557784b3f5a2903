"""Configuration loader for lattice experiments."""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

logger = logging.getLogger(__name__)

BINOMIAL_PRESETS = ("example1", "example2", "example3", "example4", "analytic-compare", "custom")
MULTINOMIAL_PRESETS = ("newton", "energy")

# Parameters each preset pins; example4 leaves alpha and beta unset.
# newton and energy take their model (theta, potential, ...) from the "newton" section.
PRESETS: Dict[str, Dict[str, Any]] = {
    "example1": {
        "grid": {"dx": 0.3, "dt": 0.003},
        "rates": {"alpha": 0.006, "beta": 0.006, "form": "step_probability"},
        "n_steps": 150, "sigma": 0.6, "support_half_width": 6.9,
    },
    "example2": {
        "grid": {"dx": 0.3, "dt": 0.003},
        "rates": {"alpha": 0.006, "beta": 0.006, "form": "step_probability"},
        "n_steps": 150, "sigma": 0.1, "support_half_width": 6.9,
    },
    "example3": {
        "grid": {"dx": 0.3, "dt": 0.003},
        "rates": {"alpha": 0.015, "beta": 0.015, "form": "step_probability"},
        "n_steps": 150, "sigma": 1.5, "support_half_width": 6.9,
    },
    "example4": {
        "grid": {"dx": 0.3, "dt": 0.003},
        "rates": {"alpha": None, "beta": None, "form": "step_probability"},
        "n_steps": 150, "sigma": 1.5, "support_half_width": 6.9,
    },
    "analytic-compare": {
        "grid": {"dx": 0.3, "dt": 0.003},
        "rates": {"alpha": 0.006, "beta": 0.006, "form": "step_probability"},
        "n_steps": 150, "sigma": 0.6, "support_half_width": 6.9,
    },
    "newton": {
        "grid": {"dx": 0.05, "dt": 0.005},
        "n_steps": 150, "sigma": 0.5, "support_half_width": 2.5,
    },
    "energy": {
        "grid": {"dx": 0.05, "dt": 0.005},
        "n_steps": 150, "sigma": 0.5, "support_half_width": 2.5,
    },
}


class ConfigError(ValueError):
    """Raised for configuration that cannot describe a valid experiment."""


class GridConfig(BaseModel):
    dx: float = Field(..., gt=0, description="Space step")
    dt: float = Field(..., gt=0, description="Time step")


class RatesConfig(BaseModel):
    alpha: Optional[float] = Field(None, ge=0, description="Up-to-down switching probability or rate")
    beta: Optional[float] = Field(None, ge=0, description="Down-to-up switching probability or rate")
    form: Literal["step_probability", "continuum_rate"] = Field(
        "step_probability", description="Whether alpha/beta are per-step probabilities or rates"
    )


class NewtonConfig(BaseModel):
    theta: float = Field(1.0, ge=0, description="Base switching rate")
    potential: Literal["linear", "harmonic", "free"] = Field("linear", description="Shape of V(x)")
    gradient: float = Field(1.0, description="V'(x) for the linear potential")
    curvature: float = Field(0.0, description="K in V(x) = K x^2 / 2 for the harmonic potential")
    j_max: int = Field(8, ge=1, description="Largest velocity index kept")
    x0: float = Field(0.0, description="Centre of the initial Gaussian")


class AnalyticConfig(BaseModel):
    n_quad: int = Field(4001, ge=3, description="Light-cone quadrature points (odd)")
    n_samples: int = Field(4001, ge=4, description="Samples of the initial profile")
    kernel: Literal["exact", "printed"] = Field("exact", description="Cauchy kernel")
    refinements: List[int] = Field(default_factory=lambda: [1, 2, 4], description="Grid refinement factors")

    @field_validator("n_quad")
    @classmethod
    def _odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("n_quad must be odd")
        return value

    @field_validator("refinements")
    @classmethod
    def _positive(cls, value: List[int]) -> List[int]:
        if not value or any(r < 1 for r in value):
            raise ValueError("refinements must be a nonempty list of positive integers")
        return value


class ExperimentConfig(BaseModel):
    """Validated description of one experiment run."""

    preset: Literal["example1", "example2", "example3", "example4", "newton", "energy",
                    "analytic-compare", "custom"]
    grid: GridConfig
    rates: RatesConfig = Field(default_factory=RatesConfig)
    newton: NewtonConfig = Field(default_factory=NewtonConfig)
    analytic: AnalyticConfig = Field(default_factory=AnalyticConfig)
    n_steps: int = Field(..., ge=0, description="Number of lattice steps")
    sigma: float = Field(..., gt=0, description="Standard deviation of the initial Gaussian")
    support_half_width: float = Field(..., ge=0, description="Initial support is [-w, w]")
    initial: Literal["gaussian", "point"] = Field("gaussian", description="Initial density shape")
    output_dir: str = Field("output", description="Directory for artifacts")
    dump_interval: int = Field(10, ge=1, description="Steps between snapshot files")
    dump_all: bool = Field(False, description="Write every step")
    threads: int = Field(1, ge=1, description="Worker threads for analytic evaluation")

    @model_validator(mode="after")
    def _rates_present(self) -> "ExperimentConfig":
        if self.preset in BINOMIAL_PRESETS and (self.rates.alpha is None or self.rates.beta is None):
            raise ValueError(f"preset {self.preset} needs explicit alpha and beta")
        return self

    @property
    def is_multinomial(self) -> bool:
        return self.preset in MULTINOMIAL_PRESETS


class ExperimentSettings:
    """Layered settings: defaults, YAML file, environment, then explicit overrides."""

    DEFAULT_CONFIG = {
        "output": {
            "directory": "output",
            "dump_interval": 10,
            "dump_all": False,
        },
        "runtime": {
            "threads": 1,
        },
        "custom": {
            "grid": {"dx": 0.3, "dt": 0.003},
            "rates": {"alpha": 0.006, "beta": 0.006, "form": "step_probability"},
            "n_steps": 150,
            "sigma": 0.6,
            "support_half_width": 6.9,
            "initial": "gaussian",
        },
        "newton": {
            "theta": 1.0,
            "potential": "linear",
            "gradient": 1.0,
            "curvature": 0.0,
            "j_max": 8,
            "x0": 0.0,
        },
        "analytic": {
            "n_quad": 4001,
            "n_samples": 4001,
            "kernel": "exact",
            "refinements": [1, 2, 4],
        },
    }

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize settings.

        Args:
            config_path: Path to a YAML (or JSON) config file. If None, uses
                        config.yaml at the repository root when present.

        Raises:
            ConfigError: An explicitly named file is missing or malformed.
        """
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)

        if config_path is None:
            default_path = Path(__file__).parent.parent / "config.yaml"
            if default_path.exists():
                self._load_from_file(default_path)
        else:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            self._load_from_file(config_path)

        self._load_from_env()

    def _load_from_file(self, config_path):
        """Load configuration from a YAML file."""
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_config = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"could not load config from {config_path}: {e}") from e
        if file_config is None:
            return
        if not isinstance(file_config, dict):
            raise ConfigError(f"config file {config_path} must contain a mapping")
        self._merge_config(self.config, file_config)
        logger.debug("Loaded configuration from %s", config_path)

    def _load_from_env(self):
        """Override config with environment variables."""
        try:
            if os.getenv("PATH_DIFFUSION_OUTPUT_DIR"):
                self.config["output"]["directory"] = os.getenv("PATH_DIFFUSION_OUTPUT_DIR")
            if os.getenv("PATH_DIFFUSION_DUMP_INTERVAL"):
                self.config["output"]["dump_interval"] = int(os.getenv("PATH_DIFFUSION_DUMP_INTERVAL"))
            if os.getenv("PATH_DIFFUSION_THREADS"):
                self.config["runtime"]["threads"] = int(os.getenv("PATH_DIFFUSION_THREADS"))
            if os.getenv("PATH_DIFFUSION_N_QUAD"):
                self.config["analytic"]["n_quad"] = int(os.getenv("PATH_DIFFUSION_N_QUAD"))
        except ValueError as e:
            raise ConfigError(f"invalid numeric environment override: {e}") from e

    def _merge_config(self, base: Dict, override: Dict):
        """Recursively merge override config into base config."""
        for key, value in override.items():
            if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                self._merge_config(base[key], value)
            else:
                base[key] = value

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Get configuration value using dot notation.

        Args:
            key_path: Dot-separated path (e.g., "analytic.n_quad")
            default: Default value if key not found

        Returns:
            Configuration value
        """
        value = self.config
        for key in key_path.split("."):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    @property
    def output_dir(self) -> str:
        return self.get("output.directory", "output")

    @property
    def dump_interval(self) -> int:
        return self.get("output.dump_interval", 10)

    @property
    def threads(self) -> int:
        return self.get("runtime.threads", 1)

    def build(self, preset: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        """
        Resolve a preset into a validated ExperimentConfig.

        Args:
            preset: Preset name; "custom" takes its parameters from the "custom" section.
            overrides: Dot-path values (e.g. {"rates.alpha": 0.02}) applied last.

        Raises:
            ConfigError: Unknown preset or parameters that fail validation.
        """
        if preset != "custom" and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")

        resolved: Dict[str, Any] = {
            "preset": preset,
            "newton": copy.deepcopy(self.get("newton", {})),
            "analytic": copy.deepcopy(self.get("analytic", {})),
            "output_dir": self.output_dir,
            "dump_interval": self.dump_interval,
            "dump_all": self.get("output.dump_all", False),
            "threads": self.threads,
        }
        pinned = self.get("custom", {}) if preset == "custom" else PRESETS[preset]
        self._merge_config(resolved, copy.deepcopy(pinned))
        if preset == "example4":
            # the only preset whose rates come from the user
            self._merge_config(resolved, {"rates": copy.deepcopy(self.get("example4.rates", {}))})

        for key_path, value in (overrides or {}).items():
            if value is None:
                continue
            target = resolved
            keys = key_path.split(".")
            for key in keys[:-1]:
                target = target.setdefault(key, {})
            target[keys[-1]] = value

        try:
            return ExperimentConfig.model_validate(resolved)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

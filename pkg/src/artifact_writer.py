import os
import json
import logging
from typing import Any, Optional

import numpy as np
import pandas as pd

from src.lattice import JointDensity2

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

SNAPSHOT_COLUMNS = ["t", "node_index", "x", "q_plus", "q_minus", "rho", "phi"]
MULTI_COLUMNS = ["t", "j", "v_j", "node_index", "x", "q"]
ANALYTIC_COLUMNS = ["t", "x", "q_plus", "q_minus", "rho"]


class ArtifactWriter:
    """Writes run artifacts (CSV tables and JSON documents) under one output directory."""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = output_dir or os.getenv("PATH_DIFFUSION_OUTPUT_DIR") or "output"

    def _resolve_path(self, file_name: str) -> str:
        """Resolve file path against the output directory and create its parent directories."""
        # absolute names are written as given
        if os.path.isabs(file_name):
            resolved = file_name
        else:
            resolved = os.path.join(self.output_dir, file_name)

        os.makedirs(os.path.dirname(resolved) or ".", exist_ok=True)

        return resolved

    def save_frame(self, frame: pd.DataFrame, file_name: str) -> str:
        try:
            resolved_path = self._resolve_path(file_name)
            frame.to_csv(resolved_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
            logger.debug("Wrote %d rows to %s", len(frame), resolved_path)
            return resolved_path
        except OSError as e:
            logger.error("Error saving CSV %s: %s", file_name, e)
            raise

    def save_json(self, payload: Any, file_name: str) -> str:
        try:
            resolved_path = self._resolve_path(file_name)
            with open(resolved_path, "w", encoding="utf-8") as f:
                json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)
                f.write("\n")
            logger.debug("Wrote %s", resolved_path)
            return resolved_path
        except (OSError, ValueError) as e:
            logger.error("Error saving JSON %s: %s", file_name, e)
            raise

    @staticmethod
    def joint_density_frame(q: JointDensity2) -> pd.DataFrame:
        return pd.DataFrame({
            "t": np.full(q.grid.n_nodes, q.t),
            "node_index": q.grid.nodes,
            "x": q.grid.x,
            "q_plus": q.q_plus,
            "q_minus": q.q_minus,
            "rho": q.rho,
            "phi": q.phi,
        }, columns=SNAPSHOT_COLUMNS)

    @staticmethod
    def multi_density_frame(q) -> pd.DataFrame:
        """One row per (velocity, node) of a MultiDensity, velocities in increasing order."""
        n_velocities, n_nodes = q.q.shape
        js = np.repeat(np.arange(-q.j_max, q.j_max + 1), n_nodes)
        return pd.DataFrame({
            "t": np.full(n_velocities * n_nodes, q.t),
            "j": js,
            "v_j": js * q.grid.c,
            "node_index": np.tile(q.grid.nodes, n_velocities),
            "x": np.tile(q.grid.x, n_velocities),
            "q": q.q.ravel(),
        }, columns=MULTI_COLUMNS)

    @staticmethod
    def analytic_frame(t: float, x: np.ndarray, q_plus: np.ndarray, q_minus: np.ndarray) -> pd.DataFrame:
        return pd.DataFrame({
            "t": np.full(len(x), float(t)),
            "x": x,
            "q_plus": q_plus,
            "q_minus": q_minus,
            "rho": np.asarray(q_plus) + np.asarray(q_minus),
        }, columns=ANALYTIC_COLUMNS)

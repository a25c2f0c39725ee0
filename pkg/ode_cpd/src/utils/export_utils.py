import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from ode_cpd.src.observations import NoiseSpec, ObservationSet
from ode_cpd.src.utils.exceptions import ContractViolationError

logger = logging.getLogger(__name__)

ARTIFACTS = {
    "trajectory": "trajectory.csv",
    "observations": "observations.csv",
    "truth": "truth.yaml",
    "detections": "detections.csv",
    "llr_trace": "llr_trace.csv",
    "run_report": "run_report.json",
    "change_probability": "change_probability.csv",
    "samples": "samples.parquet",
    "metrics": "metrics.csv",
    "benchmark": "benchmark.csv",
    "uq_sensitivity": "uq_sensitivity.csv",
    "config": "cfg.yaml",
    "flags": "flags.json",
}


def get_artifact_path(directory: str, artifact: str) -> str:
    """Path of a named run artifact inside `directory`."""
    return os.path.join(directory, ARTIFACTS[artifact])


def format_header(config_hash: str, seed: Any) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def parse_header(line: str) -> Dict[str, str]:
    if not line.startswith("#"):
        return {}
    fields = [item.split("=", 1) for item in line.lstrip("# ").split()]
    return {k: v for k, v in (f for f in fields if len(f) == 2)}


def write_csv(df: pd.DataFrame, path: str, config_hash: str, seed: Any) -> str:
    """Writes a csv whose first line names the config hash and the seed.

    Missing values are written as empty cells, lines end with LF.
    """

    with open(path, "w", encoding="utf-8", newline="") as fp:
        fp.write(format_header(config_hash, seed) + "\n")
        df.to_csv(fp, index=False, lineterminator="\n", na_rep="")
    return path


def read_csv(path: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
    """Reads a csv written by `write_csv` and returns it with its header fields."""

    with open(path, "r", encoding="utf-8") as fp:
        header = parse_header(fp.readline())
    return pd.read_csv(path, comment="#"), header


def write_observations(
    obs: ObservationSet, path: str, config_hash: str, seed: Any
) -> str:
    return write_csv(obs.to_frame(), path, config_hash, seed)


def read_observations(path: str, noise: Optional[NoiseSpec] = None) -> ObservationSet:
    df, _ = read_csv(path)
    if "t" not in df.columns:
        raise ContractViolationError(f"{path} has no time column t.")
    return ObservationSet.from_frame(df, noise)


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    return value


def write_yaml(path: str, content: Dict[str, Any]) -> str:
    with open(path, "w", encoding="utf-8") as fp:
        yaml.safe_dump(_to_builtin(content), fp, sort_keys=False)
    return path


def read_yaml(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fp:
        return yaml.safe_load(fp) or {}


def write_json(path: str, content: Dict[str, Any]) -> str:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(_to_builtin(content), fp, indent=2)
    return path


def save_run_report(directory: str, report: Dict[str, Any]) -> str:
    """Writes the structured run report of a detection run."""

    path = get_artifact_path(directory, "run_report")
    logger.info(f"Writing run report to {path}")
    return write_json(path, report)


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fp:
        return json.load(fp)

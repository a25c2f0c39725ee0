import json
import os
import subprocess
import sys

import pandas as pd
import pytest

from ode_cpd.src.utils.config_utils import save_config_yaml


def get_experiment_status(path: str) -> str:
    """Get status information from experiment.

    Args:
        path: path to experiment folder
    Returns:
        experiment status
    """

    try:
        flag_json_path = os.path.join(path, "flags.json")
        if not os.path.exists(flag_json_path):
            return "none"
        with open(flag_json_path) as file:
            flags = json.load(file)
            status = flags.get("status", "none")
        return status
    except Exception:
        return "none"


def run_command(command, cfg_path, *extra, stdin=None):
    # repository root directory
    root_dir = os.path.abspath(
        os.path.join(os.path.dirname(os.path.realpath(__file__)), "../../")
    )
    cmd = [
        f"{sys.executable}",
        os.path.join(root_dir, "run.py"),
        command,
        "-Y",
        f"{cfg_path}",
        *extra,
    ]
    return subprocess.run(
        cmd, cwd=root_dir, input=stdin, capture_output=True, text=True
    )


@pytest.mark.slow
def test_simulate_detect_metrics_cli(tmp_path, exponential_cfg):
    cfg_path = os.path.join(tmp_path, "cfg.yaml")
    save_config_yaml(cfg_path, exponential_cfg)
    output_directory = exponential_cfg.output_directory

    for command in ["simulate", "detect", "metrics"]:
        result = run_command(command, cfg_path, "--seed", "3")
        assert result.returncode == 0, result.stderr
        assert get_experiment_status(path=output_directory) == "finished"

    for artifact in [
        "trajectory.csv",
        "observations.csv",
        "truth.yaml",
        "detections.csv",
        "llr_trace.csv",
        "run_report.json",
        "metrics.csv",
        "cfg.yaml",
    ]:
        assert os.path.exists(os.path.join(output_directory, artifact))

    with open(os.path.join(output_directory, "metrics.csv")) as fp:
        assert fp.readline().startswith("# config_hash=")
    metrics = pd.read_csv(os.path.join(output_directory, "metrics.csv"), comment="#")
    assert metrics["method"].tolist() == ["runge-kutta"]


@pytest.mark.slow
def test_overrides_and_failures_cli(tmp_path, exponential_cfg):
    cfg_path = os.path.join(tmp_path, "cfg.yaml")
    save_config_yaml(cfg_path, exponential_cfg)
    out = os.path.join(tmp_path, "other")

    result = run_command(
        "simulate", cfg_path, "--out", out, "--data.n_observations", "30"
    )
    assert result.returncode == 0, result.stderr
    observations = pd.read_csv(os.path.join(out, "observations.csv"), comment="#")
    assert len(observations) == 30

    result = run_command("simulate", cfg_path, "--out", out, "--detector.threshold=-1")
    assert result.returncode == 1
    assert get_experiment_status(path=out) == "failed"


@pytest.mark.slow
def test_detect_from_stdin_cli(tmp_path, exponential_cfg):
    cfg_path = os.path.join(tmp_path, "cfg.yaml")
    save_config_yaml(cfg_path, exponential_cfg)
    output_directory = exponential_cfg.output_directory

    result = run_command("simulate", cfg_path, "--seed", "3")
    assert result.returncode == 0, result.stderr
    with open(os.path.join(output_directory, "observations.csv")) as fp:
        records = fp.read()

    result = run_command("detect", cfg_path, "--stream", "-", stdin=records)
    assert result.returncode == 0, result.stderr
    assert get_experiment_status(path=output_directory) == "finished"

    trace = pd.read_csv(os.path.join(output_directory, "llr_trace.csv"), comment="#")
    assert len(trace) == 40 - 15

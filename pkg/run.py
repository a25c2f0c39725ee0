import argparse
import logging
import os
import sys
import time
from typing import Any

from ode_cpd.src import pipelines
from ode_cpd.src.utils.config_utils import (
    apply_overrides,
    load_config_py,
    load_config_yaml,
    save_config_yaml,
)
from ode_cpd.src.utils.export_utils import get_artifact_path
from ode_cpd.src.utils.logging_utils import initialize_logging, write_flag
from ode_cpd.src.utils.utils import format_runtime

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "detect", "uq", "benchmark", "metrics")


def run(cfg: Any, command: str, args: argparse.Namespace) -> None:
    """Runs one subcommand.

    Args:
        cfg: config object with all the settings
        command: one of `COMMANDS`
        args: parsed command-line flags
    """

    seed = getattr(args, "seed", None)
    data_dir = getattr(args, "data", None)
    if command == "simulate":
        pipelines.run_simulate(cfg, seed=seed)
    elif command == "detect":
        pipelines.run_detect(
            cfg,
            data_dir=data_dir,
            backend=getattr(args, "backend", None),
            seed=seed,
            stream=getattr(args, "stream", None),
        )
    elif command == "uq":
        if getattr(args, "prior_sweep", False):
            pipelines.run_uq_sensitivity(cfg, data_dir=data_dir, seed=seed)
        else:
            pipelines.run_uq(cfg, data_dir=data_dir, seed=seed)
    elif command == "metrics":
        pipelines.run_metrics(cfg, data_dir=data_dir)
    elif command == "benchmark":
        pipelines.run_benchmark(
            cfg, threshold_sweep=getattr(args, "threshold_sweep", False), seed=seed
        )


def parse_args(argv):
    parser = argparse.ArgumentParser(description="Online change points in ODEs")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "-C", "--config", help="config filename", default=argparse.SUPPRESS
    )
    parser.add_argument("-Y", "--yaml", help="yaml filename", default=argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--out", help="output directory", default=argparse.SUPPRESS)
    parser.add_argument(
        "--data", help="directory with simulated data", default=argparse.SUPPRESS
    )
    parser.add_argument(
        "--backend", choices=("omagic", "runge-kutta"), default=argparse.SUPPRESS
    )
    parser.add_argument(
        "--stream",
        help="detect on csv records read one at a time from a file, - for stdin",
        default=argparse.SUPPRESS,
    )
    parser.add_argument("--paper-scale", action="store_true")
    parser.add_argument("--threshold-sweep", action="store_true")
    parser.add_argument("--prior-sweep", action="store_true")
    parser_args, unknown = parser.parse_known_args(argv)

    if "config" in parser_args:
        cfg = load_config_py(parser_args.config)
    elif "yaml" in parser_args:
        cfg = load_config_yaml(parser_args.yaml)
    else:
        raise ValueError("Please, provide a configuration file")

    overrides = {}
    it = iter(unknown)
    for arg in it:
        if not arg.startswith("--"):
            continue
        key, _, value = arg[2:].partition("=")
        if not value:
            value = next(it, "")
        overrides[key] = value
    apply_overrides(cfg, overrides)

    if parser_args.paper_scale:
        cfg.apply_paper_scale()
    if "out" in parser_args:
        cfg.output_directory = parser_args.out
    if "seed" in parser_args:
        cfg.environment.seed = parser_args.seed
    if "backend" in parser_args:
        cfg.detector.backend = parser_args.backend
    return cfg, parser_args


if __name__ == "__main__":
    cfg, args = parse_args(sys.argv[1:])

    out_dir = cfg.output_directory
    os.makedirs(out_dir, exist_ok=True)

    initialize_logging(cfg)

    flag_path = get_artifact_path(out_dir, "flags")
    write_flag(flag_path, "status", "running")
    global_start_time = time.time()
    try:
        pipelines.prepare_run(cfg)
        run(cfg=cfg, command=args.command, args=args)
    except Exception:
        logging.error("Exception occurred during the run:", exc_info=True)
        write_flag(flag_path, "status", "failed")
        sys.exit(1)

    save_config_yaml(get_artifact_path(out_dir, "config"), cfg)
    write_flag(flag_path, "status", "finished")
    write_flag(
        flag_path, "info", f"Runtime: {format_runtime(time.time() - global_start_time)}"
    )

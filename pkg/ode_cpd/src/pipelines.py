"""Experiment pipelines behind the command-line subcommands.

Every artifact lands in the output directory (or the `--out` override) and
starts with a `# config_hash=<h> seed=<s>` line.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import IO, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from ode_cpd.python_configs.cfg_checks import check_config_for_errors
from ode_cpd.src.detectors.glr_detector import (
    DetectionRun,
    run_detector,
    stream_detector,
    to_inference_domain,
)
from ode_cpd.src.detectors.magi_backend import MagiBackend
from ode_cpd.src.loggers import MainLogger
from ode_cpd.src.magi import DiscretizationGrid, MagiState, maximize
from ode_cpd.src.metrics.change_point_metrics import (
    DetectionRecord,
    DetectionScore,
    Metrics,
)
from ode_cpd.src.observations import (
    NoiseSpec,
    ObservationSet,
    SimulatedExperiment,
    read_observation_stream,
    simulate_experiment,
)
from ode_cpd.src.systems import OdeSystem, Systems
from ode_cpd.src.uq import (
    HmcConfig,
    SampleStore,
    UqPrior,
    change_counts,
    change_probability,
    gibbs_sample,
    initial_indicator,
)
from ode_cpd.src.utils.config_utils import config_hash, save_config_yaml
from ode_cpd.src.utils.exceptions import ConfigError, ContractViolationError
from ode_cpd.src.utils.export_utils import (
    get_artifact_path,
    read_csv,
    read_json,
    read_observations,
    read_yaml,
    save_run_report,
    write_csv,
    write_json,
    write_yaml,
)
from ode_cpd.src.utils.logging_utils import TqdmToLogger
from ode_cpd.src.utils.utils import spawn_seeds

logger = logging.getLogger(__name__)

REPORT_METRICS = ("far", "edd", "mae", "cover", "mar")
# column order of metrics.csv and benchmark.csv after the grouping columns
TABLE_COLUMNS = ("far", "edd", "mae", "cover", "wall_time", "mar")


def prepare_run(cfg: Any) -> str:
    """Validates `cfg`, creates the output directory and stores the config."""

    errors = check_config_for_errors(cfg)
    if errors["title"]:
        raise ConfigError("; ".join(errors["message"]))
    os.makedirs(cfg.output_directory, exist_ok=True)
    save_config_yaml(get_artifact_path(cfg.output_directory, "config"), cfg)
    return cfg.output_directory


def _seed(cfg: Any, seed: Optional[int]) -> int:
    return cfg.environment.seed if seed is None else int(seed)


def _tolerance(cfg: Any) -> int:
    return cfg.benchmark.tolerance or cfg.detector.detection_zone


def run_simulate(cfg: Any, seed: Optional[int] = None) -> SimulatedExperiment:
    """Simulates one experiment and writes trajectory, observations and truth."""

    seed = _seed(cfg, seed)
    directory = cfg.output_directory
    digest = config_hash(cfg)
    experiment = simulate_experiment(cfg, seed)
    names = list(experiment.observations.component_names)

    trajectory = pd.DataFrame(experiment.trajectory, columns=names)
    trajectory.insert(0, "t", experiment.grid)
    write_csv(trajectory, get_artifact_path(directory, "trajectory"), digest, seed)
    write_csv(
        experiment.observations.to_frame(),
        get_artifact_path(directory, "observations"),
        digest,
        seed,
    )

    path = experiment.theta_path
    write_yaml(
        get_artifact_path(directory, "truth"),
        {
            "config_hash": digest,
            "seed": seed,
            "system": cfg.system.name,
            "n_observations": len(experiment.observations),
            "noise_model": cfg.data.noise_model,
            "noise_level": cfg.data.noise_level,
            "change_times": experiment.change_times,
            "change_indices": experiment.truth_indices(),
            "change_parameters": experiment.change_parameters,
            "theta_segments": path.values,
            "psi": experiment.psi,
            "x0": experiment.x0,
        },
    )
    logger.info(
        f"Simulated {len(experiment.observations)} observations with changes at "
        f"{np.round(experiment.change_times, 3).tolist()}"
    )
    return experiment


def load_experiment(
    directory: str,
) -> Tuple[ObservationSet, Dict[str, Any]]:
    """Reads the observations and truth sidecar written by `run_simulate`."""

    truth_path = get_artifact_path(directory, "truth")
    truth = read_yaml(truth_path) if os.path.exists(truth_path) else {}
    noise = None
    if "noise_model" in truth:
        noise = NoiseSpec(truth["noise_model"], float(truth["noise_level"]))
    obs = read_observations(get_artifact_path(directory, "observations"), noise)
    return obs, truth


def detections_frame(run: DetectionRun, theta_names: Sequence[str]) -> pd.DataFrame:
    rows = []
    for cp in run.change_points:
        row: Dict[str, Any] = {
            "detection_time": cp.detection_time,
            "k_star": cp.k_star,
            "log_lambda": cp.log_lambda,
        }
        row.update({f"theta_pre_{n}": v for n, v in zip(theta_names, cp.theta_pre)})
        row.update({f"theta_post_{n}": v for n, v in zip(theta_names, cp.theta_post)})
        row["detection_index"] = cp.detection_index
        row["change_time"] = cp.change_time
        rows.append(row)
    columns = (
        ["detection_time", "k_star", "log_lambda"]
        + [f"theta_pre_{n}" for n in theta_names]
        + [f"theta_post_{n}" for n in theta_names]
        + ["detection_index", "change_time"]
    )
    return pd.DataFrame(rows, columns=columns)


def trace_frame(run: DetectionRun) -> pd.DataFrame:
    """Per-step log Lambda trace of a detection run."""

    rows = []
    for decision in run.decisions:
        rows.append(
            {
                "t": decision.detection_time,
                "index": decision.detection_index,
                "log_lambda": decision.log_lambda,
                "l0": decision.l0,
                "l1_max": max(decision.l1.values()) if decision.l1 else np.nan,
                "threshold": decision.threshold,
                "detected": int(decision.detected),
                "skipped": int(decision.skipped),
                "k_star": decision.k_star,
                "window_lo": decision.window[0],
                "window_hi": decision.window[1],
                "converged": int(decision.converged),
            }
        )
    columns = [
        "t",
        "index",
        "log_lambda",
        "l0",
        "l1_max",
        "threshold",
        "detected",
        "skipped",
        "k_star",
        "window_lo",
        "window_hi",
        "converged",
    ]
    return pd.DataFrame(rows, columns=columns).astype({"k_star": "Int64"})


def detection_records(run: DetectionRun) -> List[DetectionRecord]:
    return [
        DetectionRecord(cp.detection_index, cp.change_index)
        for cp in run.change_points
    ]


def score(
    detections: Sequence[DetectionRecord],
    truths: Sequence[int],
    n_tests: int,
    n_observations: int,
    tolerance: int,
) -> Dict[str, float]:
    detection_score = DetectionScore.from_run(
        detections, truths, n_tests, n_observations, tolerance
    )
    return Metrics.evaluate(detection_score, REPORT_METRICS)


def run_detect(
    cfg: Any,
    data_dir: Optional[str] = None,
    backend: Optional[str] = None,
    seed: Optional[int] = None,
    threshold: Optional[float] = None,
    stream: Optional[Union[str, IO[str]]] = None,
) -> DetectionRun:
    """Runs the online detector over stored or streamed observations.

    Without `stream` the observations written by `run_simulate` are replayed in
    arrival order. With `stream` (a csv path, an open text stream or "-" for
    stdin) every record is tested as soon as it is read.
    """

    seed = _seed(cfg, seed)
    directory = cfg.output_directory
    digest = config_hash(cfg)
    main_logger = MainLogger(cfg)
    options: Dict[str, Any] = dict(
        backend=backend, threshold=threshold, seed=seed, main_logger=main_logger
    )
    if stream is None:
        obs, _ = load_experiment(data_dir or directory)
        run = run_detector(obs, cfg, **options)
    else:
        run = stream_detector(read_observation_stream(stream), cfg, **options)
    theta_names = run.state.system.theta_names
    write_csv(
        detections_frame(run, theta_names),
        get_artifact_path(directory, "detections"),
        digest,
        seed,
    )
    write_csv(trace_frame(run), get_artifact_path(directory, "llr_trace"), digest, seed)

    save_run_report(
        directory,
        {
            "config_hash": digest,
            "seed": seed,
            "backend": run.state.backend.name,
            "threshold": run.threshold,
            "n_tests": run.n_tests,
            "n_detections": len(run.change_points),
            "converged": run.state.converged,
            "wall_time": run.wall_time,
            "mean_step_time": float(np.mean(run.step_times))
            if run.step_times
            else 0.0,
            "hyperparameters": run.state.backend.hyperparameters(),
            "trace": main_logger.export(),
        },
    )
    logger.info(
        f"Detected {len(run.change_points)} changes in {run.n_tests} tests "
        f"({run.wall_time:.1f}s)"
    )
    return run


def _read_change_indices(directory: str, n_observations: int) -> List[int]:
    path = get_artifact_path(directory, "detections")
    if not os.path.exists(path):
        return []
    df, _ = read_csv(path)
    return sorted({int(k) + 1 for k in df["k_star"] if 0 < int(k) + 1 < n_observations})


def _point_estimate(
    cfg: Any,
    obs: ObservationSet,
    grid: DiscretizationGrid,
    backend: MagiBackend,
    change_indices: Sequence[int],
) -> Tuple[MagiState, List[Any]]:
    backend.fit_kernels(obs)
    kernels = backend.kernel_matrices(obs, grid, None)
    boundaries = [int(grid.obs_index[c]) for c in change_indices]
    result = maximize(
        obs,
        grid,
        kernels,
        backend.system,
        boundaries,
        sigma_floor=cfg.gp.sigma_floor,
        maxiter=cfg.detector.maxiter,
    )
    if not result.converged:
        logger.warning(f"Point estimate did not converge: {result.message}")
    return result.state, kernels


@dataclass
class UqProblem:
    """Surrogate point estimate the change indicators are sampled around."""

    obs: ObservationSet
    grid: DiscretizationGrid
    system: OdeSystem
    state: MagiState
    kernels: List[Any]
    change_indices: List[int]
    theta_init: np.ndarray


def prepare_uq(cfg: Any, source: str) -> UqProblem:
    """Fits the point estimate with one segment per detected change.

    Detected changes are read from detections.csv in `source` when present.
    """

    if cfg.uq.n_midpoints > 0:
        raise ContractViolationError(
            "Change indicators live on observation times, uq.n_midpoints must be 0."
        )
    obs_phys, _ = load_experiment(source)
    system = Systems.inference_system(cfg, Systems.from_cfg(cfg))
    obs = to_inference_domain(system, obs_phys)

    grid = DiscretizationGrid.from_observations(obs.times, cfg.uq.n_midpoints)
    change_indices = _read_change_indices(source, len(obs))
    backend = MagiBackend(cfg, system)
    state, kernels = _point_estimate(cfg, obs, grid, backend, change_indices)
    prior = UqPrior.from_cfg(cfg)
    theta_init = np.clip(
        state.theta_on_grid(), np.asarray(prior.theta_min), np.asarray(prior.theta_max)
    )
    return UqProblem(obs, grid, system, state, kernels, change_indices, theta_init)


def sample_chain(
    cfg: Any,
    problem: UqProblem,
    prior: UqPrior,
    hmc: HmcConfig,
    seed: int,
    indicator: str,
    show_progress: bool = False,
) -> SampleStore:
    state = problem.state
    return gibbs_sample(
        problem.obs,
        problem.grid,
        problem.kernels,
        prior,
        hmc,
        seed,
        problem.system,
        state.psi,
        state.sigma,
        state.x,
        problem.theta_init,
        A_init=initial_indicator(problem.grid.n, indicator),
        freeze_trajectory=cfg.uq.freeze_trajectory,
        theta_scale=cfg.uq.theta_scale,
        store_trajectory=False,
        show_progress=show_progress,
    )


def run_uq(
    cfg: Any, data_dir: Optional[str] = None, seed: Optional[int] = None
) -> SampleStore:
    """Samples change indicators over the stored series.

    Starts from a surrogate point estimate with one segment per detected
    change, read from detections.csv when present.
    """

    seed = _seed(cfg, seed)
    directory = cfg.output_directory
    digest = config_hash(cfg)
    problem = prepare_uq(cfg, data_dir or directory)
    prior = UqPrior.from_cfg(cfg)
    hmc = HmcConfig.from_cfg(cfg)

    chain_seeds = spawn_seeds(seed, cfg.uq.n_chains)
    jobs = (
        delayed(sample_chain)(
            cfg,
            problem,
            prior,
            hmc,
            chain_seed,
            cfg.uq.initial_indicator,
            show_progress=chain == 0,
        )
        for chain, chain_seed in enumerate(chain_seeds)
    )
    stores: List[SampleStore] = Parallel(
        n_jobs=min(cfg.uq.n_chains, cfg.detector.number_of_workers)
    )(jobs)
    store = stores[0]

    sums, count = change_counts(store)
    probability = pd.DataFrame(
        {"t": problem.grid.times, "probability": sums / count, "count": sums}
    )
    write_csv(
        probability,
        get_artifact_path(directory, "change_probability"),
        digest,
        seed,
    )
    store.to_parquet(get_artifact_path(directory, "samples"))
    write_json(
        os.path.join(directory, "uq_report.json"),
        {
            "config_hash": digest,
            "seed": seed,
            "change_indices": problem.change_indices,
            "psi": problem.state.psi,
            "sigma": problem.state.sigma,
            "chains": [s.acceptance_report() for s in stores],
            "chain_change_probability": [
                (change_counts(s)[0] / len(s)).tolist() for s in stores
            ],
        },
    )
    return store


def sensitivity_settings(cfg: Any) -> List[Dict[str, Any]]:
    """Base prior and sampler setting followed by its one-knob variations."""

    uq = cfg.uq
    base = {
        "sigma0_scale": 1.0,
        "lambda0": uq.lambda0,
        "step_size": uq.step_size,
        "leapfrog_steps": uq.leapfrog_steps,
        "initial_indicator": uq.initial_indicator,
    }
    variations = [
        ("sigma0_scale", uq.sensitivity_sigma0_scales),
        ("lambda0", uq.sensitivity_lambda0),
        ("step_size", uq.sensitivity_step_sizes),
        ("leapfrog_steps", uq.sensitivity_leapfrog_steps),
        ("initial_indicator", uq.sensitivity_initial_indicators),
    ]
    settings = [base]
    for key, values in variations:
        for value in values:
            setting = {**base, key: value}
            if setting not in settings:
                settings.append(setting)
    return settings


def _sample_setting(
    cfg: Any, problem: UqProblem, setting: Dict[str, Any], seed: int
) -> SampleStore:
    base = UqPrior.from_cfg(cfg)
    prior = dataclasses.replace(
        base,
        sigma0=tuple(setting["sigma0_scale"] * s for s in base.sigma0),
        lambda0=float(setting["lambda0"]),
    )
    hmc = dataclasses.replace(
        HmcConfig.from_cfg(cfg),
        epsilon=float(setting["step_size"]),
        initial_epsilon=float(setting["step_size"]),
        leapfrog_steps=int(setting["leapfrog_steps"]),
    )
    return sample_chain(cfg, problem, prior, hmc, seed, setting["initial_indicator"])


def run_uq_sensitivity(
    cfg: Any, data_dir: Optional[str] = None, seed: Optional[int] = None
) -> pd.DataFrame:
    """Posterior change probabilities under every `sensitivity_settings` entry.

    All settings share the point estimate and the seed. Writes one row per
    setting and grid point to uq_sensitivity.csv.
    """

    seed = _seed(cfg, seed)
    directory = cfg.output_directory
    problem = prepare_uq(cfg, data_dir or directory)
    settings = sensitivity_settings(cfg)

    progress = tqdm(
        settings,
        file=TqdmToLogger(logger, level=logging.INFO),
        mininterval=5,
        desc="prior settings",
    )
    stores: List[SampleStore] = Parallel(
        n_jobs=min(len(settings), cfg.detector.number_of_workers)
    )(delayed(_sample_setting)(cfg, problem, s, seed) for s in progress)

    frames = []
    for index, (setting, store) in enumerate(zip(settings, stores)):
        probability = change_probability(store)
        frames.append(
            pd.DataFrame(
                {
                    "setting": index,
                    **setting,
                    "t": problem.grid.times,
                    "probability": probability,
                }
            )
        )
        peak = 1 + int(np.argmax(probability[1:])) if len(probability) > 1 else 0
        logger.info(
            f"Setting {index} {setting}: peak {probability[peak]:.3f} at "
            f"t={problem.grid.times[peak]:.4g}, mean {probability[1:].mean():.3f}"
        )
    table = pd.concat(frames, ignore_index=True)
    write_csv(
        table,
        get_artifact_path(directory, "uq_sensitivity"),
        config_hash(cfg),
        seed,
    )
    return table


def run_metrics(cfg: Any, data_dir: Optional[str] = None) -> pd.DataFrame:
    """Scores the stored detections against the stored truth."""

    directory = cfg.output_directory
    source = data_dir or directory
    truth = read_yaml(get_artifact_path(source, "truth"))
    report = read_json(get_artifact_path(directory, "run_report"))
    df, header = read_csv(get_artifact_path(directory, "detections"))

    detections = [
        DetectionRecord(int(row.detection_index), int(row.k_star) + 1)
        for row in df.itertuples()
    ]
    values = score(
        detections,
        truth.get("change_indices", []),
        int(report["n_tests"]),
        int(truth["n_observations"]),
        _tolerance(cfg),
    )
    values["wall_time"] = report.get("wall_time", np.nan)
    metrics = pd.DataFrame(
        [
            {
                "method": report.get("backend", cfg.detector.backend),
                **{c: values[c] for c in TABLE_COLUMNS},
            }
        ]
    )
    write_csv(
        metrics,
        get_artifact_path(directory, "metrics"),
        header.get("config_hash", config_hash(cfg)),
        header.get("seed", cfg.environment.seed),
    )
    logger.info(f"Metrics: {values}")
    return metrics


def run_replication(
    cfg: Any, seed: int, backends: Sequence[str], thresholds: Sequence[Optional[float]]
) -> List[Dict[str, Any]]:
    """Simulates one series and scores every backend and threshold on it."""

    experiment = simulate_experiment(cfg, seed)
    truths = experiment.truth_indices().tolist()
    n_observations = len(experiment.observations)
    rows = []
    for backend in backends:
        for threshold in thresholds:
            run = run_detector(
                experiment.observations,
                cfg,
                backend=backend,
                threshold=threshold,
                calibrate=None if threshold is None else False,
                seed=seed,
            )
            values = score(
                detection_records(run),
                truths,
                run.n_tests,
                n_observations,
                _tolerance(cfg),
            )
            values["wall_time"] = run.wall_time
            rows.append(
                {
                    "method": backend,
                    "threshold": run.threshold,
                    "seed": seed,
                    **{c: values[c] for c in TABLE_COLUMNS},
                    "n_tests": run.n_tests,
                    "n_detections": len(run.change_points),
                }
            )
    return rows


def aggregate(rows: pd.DataFrame, by: Sequence[str]) -> pd.DataFrame:
    """Mean and standard deviation of every metric per group."""

    columns = list(TABLE_COLUMNS)
    grouped = rows.groupby(list(by), sort=False)
    mean = grouped[columns].mean()
    std = grouped[columns].std(ddof=0).add_suffix("_std")
    table = pd.concat([mean, std], axis=1)
    table["replications"] = grouped.size()
    return table.reset_index()


def run_benchmark(
    cfg: Any, threshold_sweep: bool = False, seed: Optional[int] = None
) -> pd.DataFrame:
    """Replicates simulate, detect and metrics over seeds, backends, thresholds."""

    seed = _seed(cfg, seed)
    directory = cfg.output_directory
    digest = config_hash(cfg)
    bench = cfg.benchmark
    seeds = [seed + r for r in range(bench.replications)]
    if threshold_sweep:
        thresholds: List[Optional[float]] = list(bench.thresholds)
    else:
        thresholds = [None]

    progress = tqdm(
        seeds,
        file=TqdmToLogger(logger, level=logging.INFO),
        mininterval=5,
        desc="replications",
    )
    results = Parallel(n_jobs=bench.number_of_workers)(
        delayed(run_replication)(cfg, s, bench.backends, thresholds) for s in progress
    )
    rows = pd.DataFrame([row for replication in results for row in replication])
    write_csv(
        rows,
        os.path.join(directory, "benchmark_replications.csv"),
        digest,
        seed,
    )

    by = ["method", "threshold"] if threshold_sweep else ["method"]
    table = aggregate(rows, by)
    write_csv(table, get_artifact_path(directory, "benchmark"), digest, seed)
    logger.info(f"Benchmark over {len(seeds)} replications:\n{table}")
    return table


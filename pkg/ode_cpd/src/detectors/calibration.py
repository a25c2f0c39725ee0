import copy
import logging
from typing import Any, List

import numpy as np
from joblib import Parallel, delayed

from ode_cpd.src.detectors.glr_detector import (
    DetectorState,
    step_inference,
    update_window,
)
from ode_cpd.src.detectors.window_fit import remap_trajectory
from ode_cpd.src.integrators import integrate_rk4
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import OdeSystem, StepFunction
from ode_cpd.src.utils.exceptions import IntegrationDivergenceError, SimulationError
from ode_cpd.src.utils.utils import spawn_seeds

__all__ = ["calibrate_threshold", "null_statistic"]

logger = logging.getLogger(__name__)


def null_statistic(
    state: DetectorState,
    system: OdeSystem,
    times: np.ndarray,
    n_prefix: int,
    x_start: np.ndarray,
    seed: int,
    series: int,
    substeps: int,
) -> float:
    """Largest log Lambda of the detector replayed on one simulated null series.

    Raises:
        SimulationError: if the simulated trajectory diverges
    """

    incumbent = state.incumbent
    try:
        trajectory = integrate_rk4(
            system,
            x_start,
            StepFunction.constant(incumbent.theta[0]),
            incumbent.psi,
            times,
            substeps=substeps,
        )
    except IntegrationDivergenceError as exc:
        raise SimulationError(
            f"Null series {series} diverged at t={exc.time}.", series=series
        ) from exc

    rng = np.random.default_rng(seed)
    noisy = trajectory + rng.normal(size=trajectory.shape) * incumbent.sigma
    observed = state.observations.mask.any(axis=0)
    noisy[:, ~observed] = np.nan

    sim_state = copy.deepcopy(state)
    sim_state.observations = ObservationSet(
        times[:n_prefix], noisy[:n_prefix], state.observations.component_names
    )
    sim_state.threshold = np.inf
    sim_state.trace = []

    largest = 0.0
    for t, values in zip(times[n_prefix:], noisy[n_prefix:]):
        decision = step_inference(sim_state, float(t), values)
        update_window(sim_state, decision)
        if not decision.skipped and np.isfinite(decision.log_lambda):
            largest = max(largest, decision.log_lambda)
    logger.debug(f"Null series {series}: max log Lambda {largest:.4f}")
    return largest


def calibrate_threshold(
    state: DetectorState, system: OdeSystem, cfg: Any, seed: int
) -> float:
    """Empirical threshold from null series simulated from the fitted model.

    Each series starts from the fitted trajectory at the start of the buffered
    observations and runs `calibration_steps` arrivals beyond them without a
    change, with the fitted noise levels. The threshold is the safety
    multiplier times the largest log Lambda over all series and steps.

    Args:
        state: freshly initialized detector state, left unchanged
        system: vector field in the inference domain
        cfg: problem configuration
        seed: random seed

    Returns:
        The calibrated threshold h.
    """

    detector = cfg.detector
    prefix_times = state.observations.times
    n_prefix = len(prefix_times)
    dt = float(np.median(np.diff(prefix_times)))
    times = np.concatenate(
        [
            prefix_times,
            prefix_times[-1] + dt * np.arange(1, detector.calibration_steps + 1),
        ]
    )
    default = np.nan_to_num(state.observations.values[:1], nan=0.0)
    x_start = remap_trajectory(state.incumbent, prefix_times[:1], default)[0]

    seeds = spawn_seeds(seed, detector.calibration_series)
    jobs = (
        delayed(null_statistic)(
            state, system, times, n_prefix, x_start, s, j, cfg.data.rk_substeps
        )
        for j, s in enumerate(seeds)
    )
    statistics: List[float] = Parallel(n_jobs=detector.number_of_workers)(jobs)

    threshold = detector.safety_multiplier * max(statistics)
    logger.info(
        f"Null statistics over {len(statistics)} series: max {max(statistics):.4f}, "
        f"median {np.median(statistics):.4f}"
    )
    return max(float(threshold), 1e-8)

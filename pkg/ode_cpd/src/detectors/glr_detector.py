"""Online change-point detection with a generalized likelihood ratio.

Every arriving observation extends the scanning window. The window is fitted
once without a change (L0) and once per candidate break in the detection zone
of its final R observations (L1); log Lambda = L1 - L0 is compared to the
threshold h. All window quantities are counted in observations.
"""

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from ode_cpd.src.detectors.magi_backend import MagiBackend
from ode_cpd.src.detectors.runge_kutta_backend import RungeKuttaBackend
from ode_cpd.src.detectors.window_fit import WindowFit
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import LogTransformedSystem, OdeSystem, Systems
from ode_cpd.src.utils.exceptions import ContractViolationError

__all__ = [
    "Backends",
    "ChangePoint",
    "DetectionRun",
    "DetectorState",
    "GlrDecision",
    "initialize",
    "refresh_kernel",
    "rk_glr_step",
    "run_detector",
    "step",
    "step_inference",
    "stream_detector",
    "update_window",
]

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-9


class Backends:
    """Backends factory."""

    _backends = {"omagic": MagiBackend, "runge-kutta": RungeKuttaBackend}

    @classmethod
    def names(cls) -> List[str]:
        return sorted(cls._backends.keys())

    @classmethod
    def get(cls, name: str) -> Any:
        """Access to Backends.

        Args:
            name: backend name
        Returns:
            A class to build the backend
        """

        backend = cls._backends.get(name)
        if backend is None:
            raise NotImplementedError(f"Backend {name} not implemented")
        return backend


@dataclass
class ChangePoint:
    detection_time: float
    detection_index: int
    k_star: int
    change_time: float
    log_lambda: float
    theta_pre: np.ndarray
    theta_post: np.ndarray

    @property
    def change_index(self) -> int:
        """Index of the first observation after the change."""
        return self.k_star + 1


@dataclass
class GlrDecision:
    """Outcome of one GLR test.

    `k_star` is the index of the last observation before the change and
    `change_time` the time of the first observation after it; both are only
    set when a change is detected.
    """

    log_lambda: float
    detected: bool
    detection_time: float
    detection_index: int
    threshold: float
    skipped: bool = False
    k_star: Optional[int] = None
    change_time: Optional[float] = None
    l0: float = float("nan")
    l1: Dict[int, float] = field(default_factory=dict)
    window: Tuple[int, int] = (0, 0)
    converged: bool = True


@dataclass
class DetectorState:
    """Per-stream state of the online detector.

    `observations` holds every received observation in the inference domain;
    the current window is `observations[lo:]`.
    """

    cfg: Any
    system: OdeSystem
    backend: Any
    observations: ObservationSet
    incumbent: WindowFit
    threshold: float
    lo: int = 0
    change_points: List[ChangePoint] = field(default_factory=list)
    last_change_index: Optional[int] = None
    full_refresh_pending: bool = False
    n_tests: int = 0
    converged: bool = True
    trace: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def window(self) -> ObservationSet:
        return self.observations.slice(self.lo, len(self.observations))

    @property
    def window_size(self) -> int:
        return len(self.observations) - self.lo

    @property
    def kernel_configs(self) -> List[Any]:
        return list(getattr(self.backend, "kernel_configs", []))


def to_inference_domain(system: OdeSystem, obs: ObservationSet) -> ObservationSet:
    if isinstance(system, LogTransformedSystem):
        return obs.map_values(system.transform, system.state_names)
    return obs


def _sliding_lower_edge(state: DetectorState) -> None:
    capacity = state.cfg.detector.window_size
    if state.window_size >= capacity:
        state.lo = len(state.observations) - capacity + 1


def initialize(
    obs_prefix: ObservationSet,
    cfg: Any,
    system: Optional[OdeSystem] = None,
    backend: Optional[str] = None,
    threshold: Optional[float] = None,
) -> DetectorState:
    """Fits the detector on a change-free prefix.

    Args:
        obs_prefix: observations assumed to contain no change
        cfg: problem configuration
        system: vector field in the inference domain, built from `cfg` if None
        backend: backend name, `cfg.detector.backend` if None
        threshold: GLR threshold, `cfg.detector.threshold` if None

    Returns:
        A state whose window is the prefix, ready for the next arrival.
    """

    if system is None:
        system = Systems.inference_system(cfg, Systems.from_cfg(cfg))
    if len(obs_prefix) < max(2, cfg.detector.min_window):
        raise ContractViolationError(
            f"The initialization prefix has only {len(obs_prefix)} observations."
        )
    backend_cls = Backends.get(backend or cfg.detector.backend)
    backend_obj = backend_cls(cfg, system)

    prefix = to_inference_domain(system, obs_prefix)
    incumbent = backend_obj.initialize(prefix)
    if not incumbent.converged:
        logger.warning(f"Initial fit did not converge: {incumbent.message}")
    logger.info(
        f"Initialized {backend_obj.name} on {len(prefix)} observations: "
        f"theta={incumbent.theta.tolist()} psi={incumbent.psi.tolist()} "
        f"sigma={incumbent.sigma.tolist()}"
    )

    state = DetectorState(
        cfg=cfg,
        system=system,
        backend=backend_obj,
        observations=prefix,
        incumbent=incumbent,
        threshold=cfg.detector.threshold if threshold is None else threshold,
        converged=incumbent.converged,
    )
    _sliding_lower_edge(state)
    return state


def refresh_kernel(state: DetectorState, policy: str) -> bool:
    """Refits kernel hyperparameters on the current window.

    Policies: "full" (phi1 and phi2), "phi1-only", "off", and "adaptive" which
    is phi1-only except for the first refresh after a detection.
    """

    if policy == "off":
        return False
    if policy not in ("full", "phi1-only", "adaptive"):
        raise ContractViolationError(f"Unknown refresh policy {policy}.")
    full = policy == "full" or (policy == "adaptive" and state.full_refresh_pending)
    refreshed = state.backend.refresh(state.window, state.incumbent.sigma, full)
    if full:
        state.full_refresh_pending = False
    return refreshed


def _candidates(state: DetectorState) -> List[int]:
    """Absolute indices k of the last pre-change observation to test."""
    i = len(state.observations) - 1
    first = max(state.lo, i - state.cfg.detector.detection_zone)
    return list(range(first, i))


def _fit_candidates(
    state: DetectorState, window: ObservationSet, candidates: List[int]
) -> List[WindowFit]:
    warm = state.incumbent.with_segments(2)

    def fit(k: int) -> WindowFit:
        return state.backend.fit(window, k + 1 - state.lo, warm)

    n_jobs = state.cfg.detector.number_of_workers
    if n_jobs > 1 and len(candidates) > 1:
        return Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(fit)(k) for k in candidates
        )
    return [fit(k) for k in candidates]


def _fit_null(
    state: DetectorState, window: ObservationSet, l1_best: Optional[WindowFit]
) -> WindowFit:
    fits = [state.backend.fit(window, None, state.incumbent.with_segments(1))]
    if l1_best is not None and np.isfinite(l1_best.value):
        fits.append(state.backend.fit(window, None, l1_best.with_segments(1)))
    return max(fits, key=lambda f: f.value)


def step_inference(
    state: DetectorState, t: float, values: np.ndarray
) -> GlrDecision:
    detector = state.cfg.detector
    state.observations = state.observations.append(t, values)
    i = len(state.observations) - 1

    if detector.refresh_policy != "off" and state.window_size >= 4:
        refresh_kernel(state, detector.refresh_policy)

    window = state.window
    since_change = (
        np.inf if state.last_change_index is None else i - state.last_change_index
    )
    skipped = since_change < detector.change_separation or state.window_size < 2
    decision = GlrDecision(
        log_lambda=0.0,
        detected=False,
        detection_time=t,
        detection_index=i,
        threshold=state.threshold,
        skipped=skipped,
        window=(state.lo, i),
    )
    if state.window_size < 2:
        return decision

    fits: List[WindowFit] = []
    candidates: List[int] = []
    if not skipped:
        candidates = _candidates(state)
        fits = _fit_candidates(state, window, candidates)

    l1_best = max(fits, key=lambda f: f.value) if fits else None
    null_fit = _fit_null(state, window, l1_best)
    decision.l0 = null_fit.value
    decision.converged = null_fit.converged and all(f.converged for f in fits)

    if fits:
        l1 = np.array([f.value for f in fits])
        # L0 is nested in every L1, so L1 >= L0 up to optimizer slack
        l1 = np.maximum(l1, null_fit.value)
        decision.l1 = {k: float(v) for k, v in zip(candidates, l1)}
        best = int(np.flatnonzero(l1 >= l1.max() - TIE_TOLERANCE)[0])
        if np.isfinite(null_fit.value):
            decision.log_lambda = float(l1[best] - null_fit.value)
        else:
            decision.log_lambda = float("inf") if np.isfinite(l1[best]) else 0.0
        state.n_tests += 1

        if decision.log_lambda > state.threshold:
            k_star = candidates[best]
            change_fit = fits[best]
            decision.detected = True
            decision.k_star = k_star
            decision.change_time = float(state.observations.times[k_star + 1])
            state.change_points.append(
                ChangePoint(
                    detection_time=t,
                    detection_index=i,
                    k_star=k_star,
                    change_time=decision.change_time,
                    log_lambda=decision.log_lambda,
                    theta_pre=change_fit.segment_values(0),
                    theta_post=change_fit.segment_values(1),
                )
            )
            state.incumbent = _post_change_incumbent(change_fit)
            logger.info(
                f"Change detected at t={t:.4g} (log Lambda={decision.log_lambda:.3f}),"
                f" estimated change time {decision.change_time:.4g}"
            )

    if not decision.detected and np.isfinite(null_fit.value):
        state.incumbent = null_fit
    state.converged = state.converged and decision.converged
    state.trace.append(
        {
            "t": t,
            "index": i,
            "log_lambda": decision.log_lambda,
            "l0": decision.l0,
            "l1": max(decision.l1.values()) if decision.l1 else float("nan"),
            "window_size": state.window_size,
            "skipped": skipped,
            "detected": decision.detected,
        }
    )
    return decision


def _post_change_incumbent(fit: WindowFit) -> WindowFit:
    post = fit.with_segments(fit.n_segments)
    post.theta = fit.theta[-1:].copy()
    post.change_index = None
    return post


def step(state: DetectorState, new_obs: Tuple[float, Any]) -> GlrDecision:
    """Runs one GLR test after the arrival of `new_obs` = (time, values).

    Values are in the physical domain with NaN for missing components. Without
    a detection the incumbent parameters are taken from the no-change fit.
    The window itself is moved by `update_window`.
    """

    t, values = new_obs
    values = np.asarray(values, dtype=float).reshape(1, -1)
    if t <= state.observations.times[-1]:
        raise ContractViolationError(
            f"Observation at t={t} does not follow the buffered "
            f"t={state.observations.times[-1]}."
        )
    if isinstance(state.system, LogTransformedSystem):
        values = state.system.transform(values)
    return step_inference(state, float(t), values[0])


def rk_glr_step(state: DetectorState, new_obs: Tuple[float, Any]) -> GlrDecision:
    """`step` of a detector fitted with the Runge-Kutta backend."""
    if not isinstance(state.backend, RungeKuttaBackend):
        raise ContractViolationError(
            f"rk_glr_step needs the runge-kutta backend, got {state.backend.name}."
        )
    return step(state, new_obs)


def update_window(state: DetectorState, decision: GlrDecision) -> None:
    """Moves the window after a test.

    After a detection the window restarts right after k*, otherwise it grows
    until it holds `window_size` observations and then slides.
    """

    if decision.detected:
        state.lo = decision.k_star + 1
        state.last_change_index = decision.k_star + 1
        state.full_refresh_pending = True
    else:
        _sliding_lower_edge(state)


@dataclass
class DetectionRun:
    state: DetectorState
    decisions: List[GlrDecision]
    threshold: float
    wall_time: float
    step_times: List[float] = field(default_factory=list)

    @property
    def change_points(self) -> List[ChangePoint]:
        return self.state.change_points

    @property
    def n_tests(self) -> int:
        return self.state.n_tests


def run_detector(
    obs: ObservationSet,
    cfg: Any,
    backend: Optional[str] = None,
    threshold: Optional[float] = None,
    calibrate: Optional[bool] = None,
    seed: Optional[int] = None,
    main_logger: Optional[Any] = None,
    n_steps: Optional[int] = None,
) -> DetectionRun:
    """Replays `obs` through the detector in arrival order."""

    records: Iterable[Tuple[float, np.ndarray]] = obs.records()
    if n_steps is not None:
        records = itertools.islice(records, cfg.detector.window_size + n_steps)
    return stream_detector(
        records,
        cfg,
        component_names=obs.component_names,
        backend=backend,
        threshold=threshold,
        calibrate=calibrate,
        seed=seed,
        main_logger=main_logger,
    )


def stream_detector(
    records: Iterable[Tuple[float, Any]],
    cfg: Any,
    component_names: Optional[Tuple[str, ...]] = None,
    backend: Optional[str] = None,
    threshold: Optional[float] = None,
    calibrate: Optional[bool] = None,
    seed: Optional[int] = None,
    main_logger: Optional[Any] = None,
) -> DetectionRun:
    """Runs the detector over `(t, values)` records as they arrive.

    The first `window_size` records are buffered to initialize (and optionally
    calibrate) the detector; every later record triggers one `step` followed by
    `update_window`. Values are in the physical domain with NaN for missing
    components.

    Raises:
        ContractViolationError: if the stream ends before the detector could
            be initialized
    """

    from ode_cpd.src.detectors.calibration import calibrate_threshold

    start_time = time.time()
    capacity = cfg.detector.window_size
    records = iter(records)
    prefix = list(itertools.islice(records, capacity))
    if len(prefix) < capacity:
        raise ContractViolationError(
            f"The stream ended after {len(prefix)} observations, "
            f"{capacity} are needed to initialize the detector."
        )
    names = component_names or Systems.from_cfg(cfg).state_names
    obs_prefix = ObservationSet(
        [t for t, _ in prefix], np.vstack([v for _, v in prefix]), names
    )
    state = initialize(obs_prefix, cfg, backend=backend, threshold=threshold)

    if calibrate if calibrate is not None else cfg.detector.calibrate:
        seed = cfg.environment.seed if seed is None else seed
        state.threshold = calibrate_threshold(state, state.system, cfg, seed)
        logger.info(f"Calibrated threshold h={state.threshold:.4f}")

    decisions, step_times = [], []
    for t, values in records:
        tic = time.time()
        decision = step(state, (t, values))
        update_window(state, decision)
        step_times.append(time.time() - tic)
        decisions.append(decision)
        if main_logger is not None:
            i = decision.detection_index
            main_logger.log("detector", "log_lambda", decision.log_lambda, step=i)
            main_logger.log("detector", "l0", decision.l0, step=i)
            main_logger.log("detector", "window_size", state.window_size, step=i)
            for name, per_component in state.backend.hyperparameters().items():
                for d, value in enumerate(per_component):
                    main_logger.log("kernel", f"{name}_{d}", value, step=i)

    if main_logger is not None:
        main_logger.log(
            "detector",
            "change_indices",
            [cp.change_index for cp in state.change_points],
        )

    return DetectionRun(
        state=state,
        decisions=decisions,
        threshold=state.threshold,
        wall_time=time.time() - start_time,
        step_times=step_times,
    )

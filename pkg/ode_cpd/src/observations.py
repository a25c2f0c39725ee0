import logging
import sys
from dataclasses import dataclass, field
from typing import (
    IO,
    Any,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd

from ode_cpd.src.integrators import integrate_rk4
from ode_cpd.src.systems import OdeSystem, StepFunction, Systems
from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    ObservationDomainError,
)
from ode_cpd.src.utils.utils import spawn_seeds

__all__ = [
    "NoiseSpec",
    "ObservationSet",
    "SimulatedExperiment",
    "generate_observations",
    "sample_change_points",
    "sample_change_windows",
    "build_parameter_path",
    "merge_changes",
    "switching_changes",
    "simulate_experiment",
    "read_observation_stream",
]

logger = logging.getLogger(__name__)

NOISE_MODELS = ("multiplicative-lognormal", "additive-gaussian")


@dataclass(frozen=True)
class NoiseSpec:
    model: str = "multiplicative-lognormal"
    level: float = 0.05

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise ContractViolationError(
                f"Unknown noise model {self.model}, expected one of {NOISE_MODELS}."
            )
        if not np.isfinite(self.level) or self.level < 0:
            raise ContractViolationError(
                f"Noise level must be finite and >= 0, got {self.level}."
            )


@dataclass
class ObservationSet:
    """Observations on the union of all component observation times.

    `values[j, d]` is the observation of component d at `times[j]`; NaN marks a
    component that was not observed at that time, so each component keeps its
    own (possibly empty) set of observation times.
    """

    times: np.ndarray
    values: np.ndarray
    component_names: Tuple[str, ...] = ()
    noise: Optional[NoiseSpec] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != len(self.times):
            raise ContractViolationError(
                f"{len(self.times)} times but {self.values.shape[0]} value rows."
            )
        if not np.all(np.isfinite(self.times)):
            raise ContractViolationError("Observation times must be finite.")
        if np.any(np.diff(self.times) <= 0):
            raise ContractViolationError(
                "Observation times must be strictly increasing."
            )
        if np.any(np.isinf(self.values)):
            raise ContractViolationError("Observed values must be finite.")
        if len(self.component_names) == 0:
            self.component_names = tuple(
                f"component_{d + 1}" for d in range(self.values.shape[1])
            )
        if len(self.component_names) != self.values.shape[1]:
            raise ContractViolationError(
                f"{len(self.component_names)} component names for "
                f"{self.values.shape[1]} components."
            )

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_components(self) -> int:
        return self.values.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def component_times(self, d: int) -> np.ndarray:
        return self.times[self.mask[:, d]]

    def component_values(self, d: int) -> np.ndarray:
        return self.values[self.mask[:, d], d]

    def n_observed(self, d: int) -> int:
        return int(self.mask[:, d].sum())

    def slice(self, start: int, stop: int) -> "ObservationSet":
        return ObservationSet(
            self.times[start:stop],
            self.values[start:stop],
            self.component_names,
            self.noise,
        )

    def append(self, t: float, values: Sequence[float]) -> "ObservationSet":
        values = np.asarray(values, dtype=float).reshape(1, -1)
        if values.shape[1] != self.n_components:
            raise ContractViolationError(
                f"Expected {self.n_components} values, got {values.shape[1]}."
            )
        if len(self.times) > 0 and t <= self.times[-1]:
            raise ContractViolationError(
                f"New observation at t={t} does not follow t={self.times[-1]}."
            )
        return ObservationSet(
            np.append(self.times, t),
            np.vstack([self.values, values]),
            self.component_names,
            self.noise,
        )

    def with_observed_components(
        self, components: Sequence[int]
    ) -> "ObservationSet":
        """Deletes every observation of the components not listed."""
        values = np.full_like(self.values, np.nan)
        components = list(components)
        values[:, components] = self.values[:, components]
        return ObservationSet(self.times, values, self.component_names, self.noise)

    def map_values(self, fn, names: Optional[Tuple[str, ...]] = None):
        with np.errstate(invalid="ignore", divide="ignore"):
            values = fn(self.values)
        return ObservationSet(
            self.times, values, names or self.component_names, self.noise
        )

    def records(self) -> Iterator[Tuple[float, np.ndarray]]:
        for t, row in zip(self.times, self.values):
            yield float(t), row.copy()

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=list(self.component_names))
        df.insert(0, "t", self.times)
        return df

    @classmethod
    def from_frame(
        cls, df: pd.DataFrame, noise: Optional[NoiseSpec] = None
    ) -> "ObservationSet":
        names = tuple(c for c in df.columns if c != "t")
        return cls(
            df["t"].to_numpy(dtype=float),
            df[list(names)].to_numpy(dtype=float),
            names,
            noise,
        )


def generate_observations(
    trajectory: np.ndarray,
    grid: np.ndarray,
    noise: NoiseSpec,
    seed: int,
    observed_components: Optional[Sequence[int]] = None,
    component_names: Tuple[str, ...] = (),
) -> ObservationSet:
    """Contaminates a trajectory with noise.

    multiplicative-lognormal: y = x * exp(eta), additive-gaussian: y = x + eta,
    eta ~ Normal(0, level^2) independently per entry.

    Raises:
        ObservationDomainError: multiplicative noise on non-positive values
    """

    trajectory = np.asarray(trajectory, dtype=float)
    rng = np.random.default_rng(seed)
    eta = rng.normal(0.0, 1.0, size=trajectory.shape) * noise.level

    if noise.model == "multiplicative-lognormal":
        if np.any(trajectory <= 0):
            raise ObservationDomainError(
                "Multiplicative noise needs a strictly positive trajectory."
            )
        values = trajectory * np.exp(eta)
    else:
        values = trajectory + eta

    obs = ObservationSet(grid, values, component_names, noise)
    if observed_components is not None and len(observed_components) > 0:
        obs = obs.with_observed_components(observed_components)
    return obs


def sample_change_points(
    rate: float,
    horizon: Union[float, Tuple[float, float]],
    min_separation: float,
    seed: int,
) -> np.ndarray:
    """Poisson-process arrival times thinned to a minimal separation.

    Args:
        rate: arrival rate per unit time
        horizon: T, or a (start, T) interval to sample on
        min_separation: minimal distance between consecutive kept arrivals
        seed: random seed

    Returns:
        Sorted change times, possibly empty.
    """

    if not rate > 0:
        raise ContractViolationError(f"rate must be > 0, got {rate}.")
    if min_separation < 0:
        raise ContractViolationError(
            f"min_separation must be >= 0, got {min_separation}."
        )
    start, end = (0.0, float(horizon)) if np.isscalar(horizon) else horizon

    rng = np.random.default_rng(seed)
    arrivals: List[float] = []
    t = float(start)
    while True:
        t += rng.exponential(1.0 / rate)
        if t > end:
            break
        arrivals.append(t)

    kept: List[float] = []
    for t in arrivals:
        if not kept or t - kept[-1] >= min_separation:
            kept.append(t)
    return np.asarray(kept, dtype=float)


def sample_change_windows(
    low: Sequence[float], high: Sequence[float], seed: int
) -> np.ndarray:
    """One change time per window, uniform on [low_k, high_k]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(np.asarray(low, dtype=float), np.asarray(high, dtype=float))


def switching_changes(
    times: Sequence[float], parameter: int, values: Sequence[float]
) -> List[Tuple[float, int, float]]:
    """Changes of one parameter that visit `values` in turn."""
    return [(float(t), parameter, values[k % len(values)]) for k, t in enumerate(times)]


def merge_changes(
    changes: Sequence[Tuple[float, int, float]]
) -> List[Tuple[float, Dict[int, float]]]:
    """Groups (time, index, value) changes by breakpoint.

    Changes at numerically equal times share one breakpoint at the earliest of
    their times; a later change of the same parameter overrides the earlier.
    """

    merged: List[Tuple[float, Dict[int, float]]] = []
    for t, p, value in sorted(changes):
        if merged and np.isclose(t, merged[-1][0]):
            merged[-1][1][int(p)] = float(value)
        else:
            merged.append((float(t), {int(p): float(value)}))
    return merged


def build_parameter_path(
    initial: Sequence[float],
    changes: Sequence[Tuple[float, int, float]],
    theta_bounds: Optional[np.ndarray] = None,
) -> StepFunction:
    """Step function starting at `initial`, applying (time, index, value) changes.

    Raises:
        ContractViolationError: if a segment value leaves `theta_bounds`
    """

    current = np.asarray(initial, dtype=float).copy()
    breakpoints: List[float] = []
    values = [current.copy()]
    for t, updates in merge_changes(changes):
        for p, value in updates.items():
            current[p] = value
        breakpoints.append(t)
        values.append(current.copy())
    path = StepFunction(breakpoints, np.asarray(values))
    if theta_bounds is not None and not path.within_bounds(theta_bounds):
        raise ContractViolationError(
            f"Parameter path {path.values.tolist()} leaves the bounds "
            f"{np.asarray(theta_bounds).tolist()}."
        )
    return path


@dataclass
class SimulatedExperiment:
    grid: np.ndarray
    trajectory: np.ndarray
    theta_path: StepFunction
    psi: np.ndarray
    x0: np.ndarray
    observations: ObservationSet
    change_times: np.ndarray
    change_parameters: List[List[int]] = field(default_factory=list)
    seed: int = 0

    def truth_indices(self) -> np.ndarray:
        """Index of the first observation under each new parameter value."""
        return np.searchsorted(self.observations.times, self.change_times, "left")


def simulate_experiment(cfg: Any, seed: int) -> SimulatedExperiment:
    """Simulates one replication of the configured experiment."""

    system: OdeSystem = Systems.from_cfg(cfg)
    seed_x0, seed_changes, seed_noise = spawn_seeds(seed, 3)
    data = cfg.data

    grid = np.arange(data.n_observations) * data.observation_spacing
    if len(cfg.system.x0) > 0:
        x0 = np.asarray(cfg.system.x0, dtype=float)
    else:
        rng = np.random.default_rng(seed_x0)
        x0 = rng.uniform(cfg.system.x0_low, cfg.system.x0_high, system.dim_states)

    changes: List[Tuple[float, int, float]] = []
    if data.change_mode == "windows":
        times = sample_change_windows(
            data.change_window_low, data.change_window_high, seed_changes
        )
        changes = [
            (float(t), p, v)
            for t, p, v in zip(times, data.change_parameters, data.change_values)
        ]
    elif data.change_mode == "poisson":
        times = sample_change_points(
            data.change_rate,
            (data.change_start, data.horizon),
            data.min_separation,
            seed_changes,
        )
        changes = switching_changes(
            times, data.change_parameters[0], data.change_values
        )

    theta_path = build_parameter_path(cfg.system.theta, changes, system.theta_bounds)
    psi = np.asarray(cfg.system.psi, dtype=float)
    trajectory = integrate_rk4(
        system, x0, theta_path, psi, grid, substeps=data.rk_substeps
    )
    obs = generate_observations(
        trajectory,
        grid,
        NoiseSpec(data.noise_model, data.noise_level),
        seed_noise,
        observed_components=data.observed_components,
        component_names=system.state_names,
    )
    logger.debug(f"Simulated {system.name} with changes at {theta_path.breakpoints}")

    return SimulatedExperiment(
        grid=grid,
        trajectory=trajectory,
        theta_path=theta_path,
        psi=psi,
        x0=x0,
        observations=obs,
        change_times=theta_path.breakpoints.copy(),
        change_parameters=[sorted(updates) for _, updates in merge_changes(changes)],
        seed=seed,
    )


def read_observation_stream(
    source: Union[str, IO[str]],
    component_names: Optional[Tuple[str, ...]] = None,
) -> Iterator[Tuple[float, np.ndarray]]:
    """Streams `t,y_1,...,y_D` records one line at a time.

    `source` is a csv path, an open text stream, or "-" for stdin. The header
    names the components, `#` lines are skipped and empty fields are missing.
    """

    if source == "-":
        source = sys.stdin
    reader = pd.read_csv(source, comment="#", chunksize=1)
    names = component_names
    for chunk in reader:
        if names is None:
            names = tuple(c for c in chunk.columns if c != "t")
            logger.debug(f"Streaming components {names}")
        row = chunk.iloc[0]
        yield float(row["t"]), row[list(names)].to_numpy(dtype=float)

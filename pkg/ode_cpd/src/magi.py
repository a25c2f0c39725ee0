"""Manifold-constrained Gaussian-process surrogate likelihood and its maximization.

For every component d the surrogate is the sum of three Gaussian log-densities:

* GP prior: x_d(I) ~ N(mu_d, K_d)
* observation noise: y_d(tau_d) ~ N(x_d(tau_d), sigma_d^2 I)
* manifold constraint: f_d(x, theta, psi) ~ N(dmu_d + m_d (x_d - mu_d), C_d)
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from ode_cpd.src.gp import GpKernelConfig, KernelMatrices, build_kernel_matrices
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import OdeSystem
from ode_cpd.src.utils.exceptions import ContractViolationError, LikelihoodError

__all__ = [
    "DiscretizationGrid",
    "MagiState",
    "MaximizeResult",
    "build_kernels",
    "initial_trajectory",
    "log_surrogate",
    "surrogate_terms",
    "grad_log_surrogate",
    "maximize",
]

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))
_TERMS = ("gp_prior", "observation_noise", "manifold_constraint")


@dataclass(frozen=True, eq=False)
class DiscretizationGrid:
    """Observation times plus `n_midpoints` equally spaced points per interval."""

    times: np.ndarray
    obs_index: np.ndarray

    def __post_init__(self):
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ContractViolationError(
                "A discretization grid needs at least two increasing times."
            )

    @property
    def n(self) -> int:
        return len(self.times)

    @classmethod
    def from_observations(
        cls, obs_times: Any, n_midpoints: int = 1
    ) -> "DiscretizationGrid":
        obs_times = np.asarray(obs_times, dtype=float)
        if len(obs_times) < 2:
            raise ContractViolationError(
                "A discretization grid needs at least two observation times."
            )
        fractions = np.arange(n_midpoints + 1) / (n_midpoints + 1)
        inner = obs_times[:-1, None] + np.diff(obs_times)[:, None] * fractions
        times = np.append(inner.reshape(-1), obs_times[-1])
        obs_index = np.arange(len(obs_times)) * (n_midpoints + 1)
        return cls(times, obs_index)


@dataclass
class MagiState:
    """Latent trajectory and parameters on a discretization grid.

    Args:
        x: trajectory, shape (N, D)
        theta: segment values, shape (S, P)
        psi: constant parameters, shape (Q,)
        sigma: noise standard deviations, shape (D,)
        boundaries: grid indices where segments 2..S start, shape (S - 1,)
    """

    x: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    boundaries: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.psi = np.asarray(self.psi, dtype=float).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        self.boundaries = np.asarray(self.boundaries, dtype=int).reshape(-1)
        if len(self.boundaries) != self.theta.shape[0] - 1:
            raise ContractViolationError(
                f"{self.theta.shape[0]} segments need {self.theta.shape[0] - 1} "
                f"boundaries, got {len(self.boundaries)}."
            )
        if np.any(np.diff(self.boundaries) < 0) or np.any(
            (self.boundaries < 0) | (self.boundaries > len(self.x))
        ):
            raise ContractViolationError(
                f"Invalid segment boundaries {self.boundaries.tolist()}."
            )
        if np.any(self.sigma <= 0):
            raise ContractViolationError("Noise levels must be positive.")

    @classmethod
    def per_point(cls, x: Any, theta_grid: Any, psi: Any, sigma: Any) -> "MagiState":
        """A state with one parameter value per grid point."""
        x = np.asarray(x, dtype=float)
        return cls(x, theta_grid, psi, sigma, np.arange(1, len(x)))

    @property
    def n_segments(self) -> int:
        return self.theta.shape[0]

    def segment_of_points(self) -> np.ndarray:
        return np.searchsorted(self.boundaries, np.arange(len(self.x)), side="right")

    def theta_on_grid(self) -> np.ndarray:
        return self.theta[self.segment_of_points()]

    def copy(self) -> "MagiState":
        return MagiState(
            self.x.copy(),
            self.theta.copy(),
            self.psi.copy(),
            self.sigma.copy(),
            self.boundaries.copy(),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.x.ravel(order="F"),
                self.theta.ravel(),
                self.psi,
                np.log(self.sigma),
            ]
        )

    def from_vector(self, vector: np.ndarray) -> "MagiState":
        """A new state with the layout of `self` filled from `vector`."""
        n_x, n_theta, n_psi = self.x.size, self.theta.size, self.psi.size
        x = vector[:n_x].reshape(self.x.shape, order="F")
        theta = vector[n_x : n_x + n_theta].reshape(self.theta.shape)
        psi = vector[n_x + n_theta : n_x + n_theta + n_psi]
        sigma = np.exp(vector[n_x + n_theta + n_psi :])
        return MagiState(x, theta, psi, sigma, self.boundaries.copy())


def build_kernels(
    configs: Sequence[GpKernelConfig],
    grid: DiscretizationGrid,
    jitter: Sequence[float] = (1e-7, 1e-3),
    c_jitter: float = 1e-6,
) -> List[KernelMatrices]:
    return [build_kernel_matrices(c, grid.times, jitter, c_jitter) for c in configs]


def _check_dimensions(
    state: MagiState,
    obs: ObservationSet,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    grid: DiscretizationGrid,
) -> None:
    expected = (grid.n, system.dim_states)
    if state.x.shape != expected:
        raise ContractViolationError(
            f"Trajectory shape {state.x.shape} does not match {expected}."
        )
    if state.theta.shape[1] != system.dim_theta or len(state.psi) != system.dim_psi:
        raise ContractViolationError("Parameter dimensions do not match the system.")
    if len(kernels) != system.dim_states or len(state.sigma) != system.dim_states:
        raise ContractViolationError("Need one kernel and one noise level per state.")
    if len(obs) != len(grid.obs_index) or obs.n_components != system.dim_states:
        raise ContractViolationError("Observations do not match the grid.")


def _pieces(
    state: MagiState,
    obs: ObservationSet,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    grid: DiscretizationGrid,
) -> Dict[str, Any]:
    _check_dimensions(state, obs, kernels, system, grid)
    theta_grid = state.theta_on_grid()
    with np.errstate(all="ignore"):
        f = system.rhs(state.x, theta_grid, state.psi, grid.times)
    centered, manifold = [], []
    for d, km in enumerate(kernels):
        xc = state.x[:, d] - km.mu
        centered.append(xc)
        manifold.append(f[:, d] - km.dmu - km.m @ xc)
    mask = obs.mask
    obs_residual = np.where(mask, obs.values - state.x[grid.obs_index], 0.0)
    return {
        "theta_grid": theta_grid,
        "centered": centered,
        "manifold": manifold,
        "mask": mask,
        "obs_residual": obs_residual,
    }


def surrogate_terms(
    state: MagiState,
    obs: ObservationSet,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    grid: DiscretizationGrid,
) -> np.ndarray:
    """Per-component log-densities, shape (D, 3): prior, noise, manifold.

    Raises:
        LikelihoodError: naming the first non-finite term and its component
    """

    pieces = _pieces(state, obs, kernels, system, grid)
    n = grid.n
    terms = np.zeros((system.dim_states, 3))
    for d, km in enumerate(kernels):
        xc, r = pieces["centered"][d], pieces["manifold"][d]
        n_d = int(pieces["mask"][:, d].sum())
        ssr = float(np.sum(pieces["obs_residual"][:, d] ** 2))
        sigma = state.sigma[d]
        with np.errstate(all="ignore"):
            terms[d, 0] = -0.5 * (xc @ km.K_inv @ xc + km.log_det_K + n * _LOG_2PI)
            terms[d, 1] = -0.5 * ssr / sigma**2 - n_d * np.log(sigma)
            terms[d, 1] -= 0.5 * n_d * _LOG_2PI
            terms[d, 2] = -0.5 * (r @ km.C_inv @ r + km.log_det_C + n * _LOG_2PI)
        for k, term in enumerate(_TERMS):
            if not np.isfinite(terms[d, k]):
                raise LikelihoodError(
                    f"The {term} term of component {system.state_names[d]} is not "
                    "finite.",
                    term=term,
                    component=d,
                )
    return terms


def log_surrogate(
    state: MagiState,
    obs: ObservationSet,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    grid: DiscretizationGrid,
) -> float:
    """Surrogate log-likelihood of `state` given the observations."""
    return float(np.sum(surrogate_terms(state, obs, kernels, system, grid)))


def grad_log_surrogate(
    state: MagiState,
    obs: ObservationSet,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    grid: DiscretizationGrid,
) -> np.ndarray:
    """Gradient of `log_surrogate` in the layout of `MagiState.to_vector`.

    That is x flattened column-major by component, then theta by segment,
    then psi, then log sigma.
    """

    pieces = _pieces(state, obs, kernels, system, grid)
    theta_grid = pieces["theta_grid"]
    with np.errstate(all="ignore"):
        jac_x = system.jacobian_x(state.x, theta_grid, state.psi, grid.times)
        jac_theta = system.jacobian_theta(state.x, theta_grid, state.psi, grid.times)
        jac_psi = system.jacobian_psi(state.x, theta_grid, state.psi, grid.times)

    v = np.stack(
        [km.C_inv @ r for km, r in zip(kernels, pieces["manifold"])], axis=-1
    )

    grad_x = -np.einsum("id,ide->ie", v, jac_x)
    for d, km in enumerate(kernels):
        grad_x[:, d] += km.m.T @ v[:, d]
        grad_x[:, d] -= km.K_inv @ pieces["centered"][d]
    sigma2 = state.sigma**2
    np.add.at(grad_x, grid.obs_index, pieces["obs_residual"] / sigma2)

    grad_theta = np.zeros_like(state.theta)
    np.add.at(
        grad_theta,
        state.segment_of_points(),
        -np.einsum("id,idp->ip", v, jac_theta),
    )
    grad_psi = -np.einsum("id,idq->q", v, jac_psi)

    n_obs = pieces["mask"].sum(axis=0)
    ssr = np.sum(pieces["obs_residual"] ** 2, axis=0)
    grad_log_sigma = -n_obs + ssr / sigma2

    grad = np.concatenate(
        [grad_x.ravel(order="F"), grad_theta.ravel(), grad_psi, grad_log_sigma]
    )
    if not np.all(np.isfinite(grad)):
        raise LikelihoodError(
            "The surrogate gradient is not finite.", term="gradient", component=None
        )
    return grad


def initial_trajectory(
    obs: ObservationSet, grid: DiscretizationGrid, kernels: Sequence[KernelMatrices]
) -> np.ndarray:
    """Linear interpolation of each component's observations onto the grid.

    Components without observations start at their mean level.
    """

    x = np.empty((grid.n, obs.n_components))
    for d in range(obs.n_components):
        times, values = obs.component_times(d), obs.component_values(d)
        if len(values) == 0:
            x[:, d] = kernels[d].mu
        else:
            x[:, d] = np.interp(grid.times, times, values)
    return x


@dataclass
class MaximizeResult:
    state: MagiState
    value: float
    converged: bool
    n_iter: int
    message: str = ""


def _parameter_bounds(
    system: OdeSystem,
    start: MagiState,
    trust_region: Optional[float],
    fit_psi: bool,
    fit_sigma: bool,
    sigma_floor: float,
) -> List[Tuple[Optional[float], Optional[float]]]:
    bounds: List[Tuple[Optional[float], Optional[float]]] = []
    bounds += [(None, None)] * start.x.size
    for _ in range(start.n_segments):
        bounds += [tuple(b) for b in system.theta_bounds]

    for q, value in enumerate(start.psi):
        lo, hi = system.psi_bounds[q]
        if not fit_psi:
            bounds.append((value, value))
        elif trust_region is not None:
            width = trust_region * abs(value)
            bounds.append((max(lo, value - width), min(hi, value + width)))
        else:
            bounds.append((lo, hi))

    log_floor = float(np.log(sigma_floor))
    for value in np.log(start.sigma):
        if not fit_sigma:
            bounds.append((value, value))
        elif trust_region is not None:
            lo = max(log_floor, value + np.log1p(-trust_region))
            bounds.append((min(lo, value), value + np.log1p(trust_region)))
        else:
            bounds.append((min(log_floor, value), None))
    return bounds


def maximize(
    obs: ObservationSet,
    grid: DiscretizationGrid,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    boundaries: Any = (),
    warm_start: Optional[MagiState] = None,
    trust_region: Optional[float] = None,
    fit_psi: bool = True,
    fit_sigma: bool = True,
    sigma_floor: float = 1e-3,
    maxiter: int = 500,
) -> MaximizeResult:
    """Maximizes the surrogate over (x, theta, psi, log sigma) with L-BFGS-B.

    Args:
        obs: observations on the grid's observation times
        grid: discretization grid
        kernels: one KernelMatrices per component on `grid`
        system: vector field in the inference domain
        boundaries: grid indices where parameter segments 2..S start
        warm_start: state to start from; its trajectory is used if it matches
            the grid and its parameters are broadcast to the segments
        trust_region: relative box around the warm start for psi and sigma
        fit_psi: optimize psi or keep the warm start value
        fit_sigma: optimize sigma or keep the warm start value
        sigma_floor: lower bound of every sigma
        maxiter: iteration limit

    Returns:
        The best state found and its value; `converged` is False when the
        optimizer stopped early, which is never raised.
    """

    boundaries = np.asarray(boundaries, dtype=int).reshape(-1)
    n_segments = len(boundaries) + 1
    start = _starting_state(obs, grid, kernels, system, boundaries, warm_start)
    bounds = _parameter_bounds(
        system,
        start,
        trust_region if warm_start is not None else None,
        fit_psi,
        fit_sigma,
        sigma_floor,
    )
    lower = np.array([-np.inf if lo is None else lo for lo, _ in bounds])
    upper = np.array([np.inf if hi is None else hi for _, hi in bounds])
    x0 = np.clip(start.to_vector(), lower, upper)

    best: Dict[str, Any] = {"value": -np.inf, "vector": x0.copy()}

    def objective(vector: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            state = start.from_vector(vector)
            value = log_surrogate(state, obs, kernels, system, grid)
            grad = grad_log_surrogate(state, obs, kernels, system, grid)
        except (LikelihoodError, ContractViolationError):
            return np.inf, np.zeros_like(vector)
        if value > best["value"]:
            best["value"], best["vector"] = value, vector.copy()
        return -value, -grad

    f0, _ = objective(x0)
    if not np.isfinite(f0):
        logger.debug("Surrogate is not finite at the starting point.")
        return MaximizeResult(
            start.from_vector(x0), -np.inf, False, 0, "non-finite start"
        )

    result = optimize.minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": maxiter, "gtol": 1e-6 * max(1.0, abs(f0))},
    )
    state = start.from_vector(best["vector"])
    if not result.success:
        logger.debug(
            f"Surrogate maximization with {n_segments} segment(s) stopped: "
            f"{result.message}"
        )
    return MaximizeResult(
        state=state,
        value=float(best["value"]),
        converged=bool(result.success),
        n_iter=int(result.nit),
        message=str(result.message),
    )


def _starting_state(
    obs: ObservationSet,
    grid: DiscretizationGrid,
    kernels: Sequence[KernelMatrices],
    system: OdeSystem,
    boundaries: np.ndarray,
    warm_start: Optional[MagiState],
) -> MagiState:
    n_segments = len(boundaries) + 1
    theta_mid = system.theta_bounds.mean(axis=1)

    if warm_start is not None and warm_start.x.shape == (grid.n, system.dim_states):
        x = warm_start.x.copy()
    else:
        x = initial_trajectory(obs, grid, kernels)

    if warm_start is None:
        theta = np.tile(theta_mid, (n_segments, 1))
        psi = np.sqrt(np.prod(np.abs(system.psi_bounds), axis=1))
        sigma = np.array(
            [
                max(0.1 * np.std(obs.component_values(d)), 1e-3)
                if obs.n_observed(d) > 1
                else 1.0
                for d in range(system.dim_states)
            ]
        )
    else:
        if warm_start.theta.shape[0] == n_segments:
            theta = warm_start.theta.copy()
        else:
            average = warm_start.theta.mean(axis=0)
            theta = np.tile(average, (n_segments, 1))
        psi, sigma = warm_start.psi.copy(), warm_start.sigma.copy()
    return MagiState(x, theta, psi, sigma, boundaries)

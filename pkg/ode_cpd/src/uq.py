"""Offline uncertainty quantification of change points.

Every grid point carries a change indicator A_i. With A_i = 0 the parameter
drifts as a Brownian increment, theta_i - theta_{i-1} ~ N(0, sigma0^2 dt_i);
with A_i = 1 it is redrawn uniformly on [theta_min, theta_max]. Changes arrive
as a Poisson process, P(A_i = 1) = 1 - exp(-lambda0 dt_i). A_1 = 1 marks the
start of the first segment.

The posterior over (A, theta, x) adds the surrogate likelihood and is sampled
by a systematic scan over the indicators. Each flip of A_i is proposed together
with a leapfrog move of (theta, x) and accepted jointly. Sampling runs in
increment coordinates, theta = cumsum(u), which have a unit Jacobian.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from ode_cpd.src.gp import KernelMatrices
from ode_cpd.src.magi import (
    DiscretizationGrid,
    MagiState,
    grad_log_surrogate,
    log_surrogate,
    surrogate_terms,
)
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import OdeSystem
from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    LikelihoodError,
    MetricUndefinedError,
    SamplerInitializationError,
)
from ode_cpd.src.utils.logging_utils import TqdmToLogger

__all__ = [
    "UqPrior",
    "HmcConfig",
    "SampleStore",
    "log_prior_A_theta",
    "log_posterior_uq",
    "gibbs_sample",
    "tune_hmc",
    "change_probability",
    "change_counts",
    "initial_indicator",
]

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))

DUAL_AVERAGING_GAMMA = 0.5
DUAL_AVERAGING_OFFSET = 10.0
ADAPTATION_WINDOW = 10


@dataclass(frozen=True)
class UqPrior:
    sigma0: Tuple[float, ...]
    lambda0: float
    theta_min: Tuple[float, ...]
    theta_max: Tuple[float, ...]

    def __post_init__(self):
        sigma0 = np.asarray(self.sigma0, dtype=float)
        lo = np.asarray(self.theta_min, dtype=float)
        hi = np.asarray(self.theta_max, dtype=float)
        if np.any(sigma0 <= 0) or not self.lambda0 > 0:
            raise ContractViolationError("sigma0 and lambda0 must be positive.")
        if len(sigma0) != len(lo) or len(lo) != len(hi) or np.any(lo >= hi):
            raise ContractViolationError(
                "Slab bounds need theta_min < theta_max for every parameter."
            )

    @property
    def log_slab_volume(self) -> float:
        return float(
            np.sum(np.log(np.asarray(self.theta_max) - np.asarray(self.theta_min)))
        )

    @classmethod
    def from_cfg(cls, cfg: Any) -> "UqPrior":
        return cls(
            tuple(cfg.uq.sigma0),
            cfg.uq.lambda0,
            tuple(cfg.uq.theta_min),
            tuple(cfg.uq.theta_max),
        )


@dataclass(frozen=True)
class HmcConfig:
    epsilon: float = 0.05
    leapfrog_steps: int = 5
    n_samples: int = 1000
    burn_in: int = 500
    target_acceptance: float = 0.7
    acceptance_band: Tuple[float, float] = (0.6, 0.8)
    # starting step size of the adaptation, epsilon when not given
    initial_epsilon: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0 or self.leapfrog_steps < 1:
            raise ContractViolationError("HMC needs epsilon > 0 and at least one step.")
        if not self.initial_epsilon > 0:
            object.__setattr__(self, "initial_epsilon", self.epsilon)

    @classmethod
    def from_cfg(cls, cfg: Any) -> "HmcConfig":
        return cls(
            epsilon=cfg.uq.step_size,
            leapfrog_steps=cfg.uq.leapfrog_steps,
            n_samples=cfg.uq.n_samples,
            burn_in=cfg.uq.burn_in,
            target_acceptance=cfg.uq.target_acceptance,
            acceptance_band=tuple(cfg.uq.acceptance_band),
        )


def _check_indicator(A: np.ndarray, n: int) -> np.ndarray:
    A = np.asarray(A).astype(np.int8).reshape(-1)
    if len(A) != n or np.any((A != 0) & (A != 1)):
        raise ContractViolationError(f"A must be a binary vector of length {n}.")
    if A[0] != 1:
        raise ContractViolationError("A_1 must be 1, the first point starts a segment.")
    return A


def log_prior_A_theta(
    A: Any, theta_grid: Any, prior: UqPrior, grid: Any
) -> float:
    """Log spike-and-slab prior of the indicators and the parameter path.

    Args:
        A: change indicators, shape (N,), A[0] = 1
        theta_grid: parameter value at each grid point, shape (N, P)
        prior: spike-and-slab hyperparameters
        grid: grid times, shape (N,)

    Returns:
        The log prior, -inf if a changed value leaves the slab bounds.
    """

    times = np.asarray(getattr(grid, "times", grid), dtype=float)
    theta_grid = np.asarray(theta_grid, dtype=float)
    A = _check_indicator(A, len(times))
    if theta_grid.shape[0] != len(times):
        raise ContractViolationError("theta_grid needs one row per grid point.")

    lo, hi = np.asarray(prior.theta_min), np.asarray(prior.theta_max)
    changed = A == 1
    if np.any((theta_grid[changed] < lo) | (theta_grid[changed] > hi)):
        return -np.inf
    value = -prior.log_slab_volume * int(changed.sum())

    dt = np.diff(times)
    rate = prior.lambda0 * dt
    value += float(np.sum(np.where(changed[1:], np.log(-np.expm1(-rate)), -rate)))

    drift = np.diff(theta_grid, axis=0)
    variance = np.asarray(prior.sigma0) ** 2 * dt[:, None]
    spike = -0.5 * (drift**2 / variance + np.log(variance) + _LOG_2PI)
    value += float(np.sum(spike[~changed[1:]]))
    return value


def log_posterior_uq(
    A: Any,
    theta_grid: Any,
    x: Any,
    obs: ObservationSet,
    kernels: Sequence[KernelMatrices],
    prior: UqPrior,
    system: OdeSystem,
    grid: DiscretizationGrid,
    psi: Any,
    sigma: Any,
) -> float:
    """Log prior plus surrogate log-likelihood with theta given per grid point."""

    value = log_prior_A_theta(A, theta_grid, prior, grid)
    if not np.isfinite(value):
        return value
    state = MagiState.per_point(x, theta_grid, psi, sigma)
    return value + log_surrogate(state, obs, kernels, system, grid)


def initial_indicator(n: int, kind: str = "single") -> np.ndarray:
    """[1, 0, ..., 0] for "single", all ones for "all"."""
    if kind == "all":
        return np.ones(n, dtype=np.int8)
    if kind != "single":
        raise ContractViolationError(f"Unknown initial indicator {kind}.")
    A = np.zeros(n, dtype=np.int8)
    A[0] = 1
    return A


def tune_hmc(hmc: HmcConfig, acceptance_history: Sequence[float]) -> HmcConfig:
    """Dual averaging of the leapfrog step size toward the target acceptance.

    `acceptance_history` holds the acceptance rate of every adaptation window
    so far. The running average of the acceptance error, weighted with the
    offset t0, pulls log epsilon away from the starting step size:

        H_m = (1 - 1 / (m + t0)) H_{m-1} + (target - a_m) / (m + t0)
        log epsilon_m = log epsilon_0 - sqrt(m) / gamma * H_m

    The result only depends on the history, so repeated calls do not compound.
    The number of leapfrog steps is unchanged.
    """

    if len(acceptance_history) == 0:
        return hmc
    error = 0.0
    for m, rate in enumerate(acceptance_history, start=1):
        weight = 1.0 / (m + DUAL_AVERAGING_OFFSET)
        error = (1.0 - weight) * error + weight * (hmc.target_acceptance - rate)
    m = len(acceptance_history)
    shrinkage = np.sqrt(m) / DUAL_AVERAGING_GAMMA
    log_epsilon = np.log(hmc.initial_epsilon) - shrinkage * error
    return dataclasses.replace(hmc, epsilon=float(np.exp(log_epsilon)))


@dataclass
class SampleStore:
    """Post-burn-in samples of the sampler."""

    times: np.ndarray
    theta_names: Tuple[str, ...]
    A: np.ndarray
    theta: np.ndarray
    log_posterior: np.ndarray
    x: Optional[np.ndarray] = None
    flip_acceptance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hmc_acceptance: float = float("nan")
    step_size: float = float("nan")

    def __len__(self) -> int:
        return self.A.shape[0]

    def to_frame(self) -> pd.DataFrame:
        """One row per sample: A_1..A_N, then one theta block per parameter."""

        n = self.A.shape[1]
        columns = {f"A_{i + 1}": self.A[:, i] for i in range(n)}
        for p, name in enumerate(self.theta_names):
            for i in range(n):
                columns[f"{name}_{i + 1}"] = self.theta[:, i, p]
        return pd.DataFrame(columns)

    def to_parquet(self, path: str) -> None:
        self.to_frame().to_parquet(path, index=False)

    def acceptance_report(self) -> Dict[str, Any]:
        return {
            "hmc_acceptance": self.hmc_acceptance,
            "mean_flip_acceptance": float(np.mean(self.flip_acceptance[1:]))
            if len(self.flip_acceptance) > 1
            else float("nan"),
            "step_size": self.step_size,
        }


def change_counts(store: SampleStore) -> Tuple[np.ndarray, int]:
    """Per-grid-point number of samples with a change, and the sample count."""
    if len(store) == 0:
        raise MetricUndefinedError("The sample store is empty.")
    return store.A.sum(axis=0).astype(int), len(store)


def change_probability(store: SampleStore) -> np.ndarray:
    """Posterior mean of A per grid point."""
    sums, count = change_counts(store)
    return sums / count


class _Target:
    """Posterior in increment coordinates z = (u, x) for fixed psi and sigma."""

    def __init__(
        self,
        obs: ObservationSet,
        grid: DiscretizationGrid,
        kernels: Sequence[KernelMatrices],
        prior: UqPrior,
        system: OdeSystem,
        psi: np.ndarray,
        sigma: np.ndarray,
        x_fixed: Optional[np.ndarray],
    ):
        self.obs = obs
        self.grid = grid
        self.kernels = kernels
        self.prior = prior
        self.system = system
        self.psi = psi
        self.sigma = sigma
        self.x_fixed = x_fixed
        self.n = grid.n
        self.P = system.dim_theta
        self.D = system.dim_states
        self.dt = np.diff(grid.times)
        self.variance = np.asarray(prior.sigma0) ** 2 * self.dt[:, None]

    @property
    def dim(self) -> int:
        return self.n * self.P + (0 if self.x_fixed is not None else self.n * self.D)

    def split(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u = z[: self.n * self.P].reshape(self.n, self.P)
        if self.x_fixed is not None:
            return u, self.x_fixed
        return u, z[self.n * self.P :].reshape(self.n, self.D, order="F")

    def join(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        u = np.vstack([theta[:1], np.diff(theta, axis=0)])
        if self.x_fixed is not None:
            return u.ravel()
        return np.concatenate([u.ravel(), x.ravel(order="F")])

    def value(self, A: np.ndarray, z: np.ndarray) -> float:
        u, x = self.split(z)
        theta = np.cumsum(u, axis=0)
        try:
            with np.errstate(all="ignore"):
                return log_posterior_uq(
                    A,
                    theta,
                    x,
                    self.obs,
                    self.kernels,
                    self.prior,
                    self.system,
                    self.grid,
                    self.psi,
                    self.sigma,
                )
        except LikelihoodError:
            return -np.inf

    def gradient(self, A: np.ndarray, z: np.ndarray) -> Optional[np.ndarray]:
        u, x = self.split(z)
        theta = np.cumsum(u, axis=0)
        state = MagiState.per_point(x, theta, self.psi, self.sigma)
        try:
            with np.errstate(all="ignore"):
                grad = grad_log_surrogate(
                    state, self.obs, self.kernels, self.system, self.grid
                )
        except LikelihoodError:
            return None
        n_x = self.n * self.D
        grad_theta = grad[n_x : n_x + self.n * self.P].reshape(self.n, self.P)
        # d/du_j = sum over i >= j of d/dtheta_i
        grad_u = np.cumsum(grad_theta[::-1], axis=0)[::-1]
        spike = A[1:] == 0
        grad_u[1:][spike] -= u[1:][spike] / self.variance[spike]
        if self.x_fixed is not None:
            return grad_u.ravel()
        return np.concatenate([grad_u.ravel(), grad[:n_x]])

    def scales(self, A: np.ndarray, theta_scale: float) -> np.ndarray:
        ranges = np.asarray(self.prior.theta_max) - np.asarray(self.prior.theta_min)
        slab = np.tile(theta_scale * ranges, (self.n, 1))
        spike = np.sqrt(self.variance)
        u_scale = slab.copy()
        u_scale[1:][A[1:] == 0] = spike[A[1:] == 0]
        if self.x_fixed is not None:
            return u_scale.ravel()
        x_scale = np.repeat(self.sigma, self.n)
        return np.concatenate([u_scale.ravel(), x_scale])


def _leapfrog(
    target: _Target,
    A: np.ndarray,
    z: np.ndarray,
    p: np.ndarray,
    scale: np.ndarray,
    epsilon: float,
    n_steps: int,
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Leapfrog in standardized coordinates q = z / scale, momentum negated."""

    q = z / scale
    grad = target.gradient(A, q * scale)
    if grad is None:
        return None
    p = p + 0.5 * epsilon * grad * scale
    for step in range(n_steps):
        q = q + epsilon * p
        grad = target.gradient(A, q * scale)
        if grad is None:
            return None
        if step < n_steps - 1:
            p = p + epsilon * grad * scale
    p = p + 0.5 * epsilon * grad * scale
    return q * scale, -p


def gibbs_sample(
    obs: ObservationSet,
    grid: DiscretizationGrid,
    kernels: Sequence[KernelMatrices],
    prior: UqPrior,
    hmc: HmcConfig,
    seed: int,
    system: OdeSystem,
    psi: Any,
    sigma: Any,
    x_init: Any,
    theta_init: Any,
    A_init: Optional[Any] = None,
    freeze_trajectory: bool = False,
    theta_scale: float = 0.01,
    store_trajectory: bool = True,
    show_progress: bool = False,
) -> SampleStore:
    """Systematic-scan Metropolis-within-Gibbs sampler over (A, theta, x).

    Each sweep visits i = 2..N and proposes flipping A_i jointly with a
    leapfrog move of (theta, x) guided by the posterior with A_i = 1, then
    refreshes (theta, x) by HMC under the current A. The step size is tuned
    during burn-in only.

    Args:
        obs: observations aligned with `grid`
        grid: discretization grid
        kernels: kernel matrices per component on `grid`
        prior: spike-and-slab prior
        hmc: leapfrog settings and sample counts
        seed: random seed
        system: vector field in the inference domain
        psi: constant parameters, kept fixed
        sigma: noise levels, kept fixed
        x_init: initial trajectory, shape (N, D)
        theta_init: initial parameter values per grid point, shape (N, P)
        A_init: initial indicators, [1, 0, ..., 0] by default
        freeze_trajectory: keep x at `x_init` and sample (A, theta) only
        theta_scale: leapfrog scale of changed values relative to the slab width
        store_trajectory: keep the sampled trajectories in the store

    Raises:
        SamplerInitializationError: if the initial posterior is not finite
    """

    rng = np.random.default_rng(seed)
    x_init = np.asarray(x_init, dtype=float)
    theta_init = np.asarray(theta_init, dtype=float)
    psi, sigma = np.asarray(psi, dtype=float), np.asarray(sigma, dtype=float)
    n = grid.n
    A = _check_indicator(
        initial_indicator(n) if A_init is None else np.asarray(A_init), n
    )

    target = _Target(
        obs,
        grid,
        kernels,
        prior,
        system,
        psi,
        sigma,
        x_init if freeze_trajectory else None,
    )
    z = target.join(theta_init, x_init)
    log_post = target.value(A, z)
    if not np.isfinite(log_post):
        diagnostics: Dict[str, Any] = {
            "log_prior": log_prior_A_theta(A, theta_init, prior, grid)
        }
        try:
            state = MagiState.per_point(x_init, theta_init, psi, sigma)
            diagnostics["surrogate_terms"] = surrogate_terms(
                state, obs, kernels, system, grid
            ).tolist()
        except LikelihoodError as exc:
            diagnostics["surrogate_error"] = f"{exc.term} of component {exc.component}"
        raise SamplerInitializationError(
            "The posterior is not finite at the initial state.",
            diagnostics=diagnostics,
        )

    total = hmc.burn_in + hmc.n_samples
    samples_A = np.zeros((hmc.n_samples, n), dtype=np.int8)
    samples_theta = np.zeros((hmc.n_samples, n, system.dim_theta))
    samples_x = (
        np.zeros((hmc.n_samples, n, system.dim_states)) if store_trajectory else None
    )
    samples_lp = np.zeros(hmc.n_samples)
    flip_proposed = np.zeros(n)
    flip_accepted = np.zeros(n)
    hmc_history: List[float] = []
    window_rates: List[float] = []
    hmc_accepted = 0

    def propose(A_target, A_guide, z, log_post):
        p = rng.standard_normal(target.dim)
        scale = target.scales(A_guide, theta_scale)
        moved = _leapfrog(
            target, A_guide, z, p, scale, hmc.epsilon, hmc.leapfrog_steps
        )
        if moved is None:
            return False, z, log_post
        z_new, p_new = moved
        log_post_new = target.value(A_target, z_new)
        log_ratio = (log_post_new - 0.5 * p_new @ p_new) - (log_post - 0.5 * p @ p)
        if np.isfinite(log_ratio) and np.log(rng.uniform()) < log_ratio:
            return True, z_new, log_post_new
        return False, z, log_post

    sweeps = range(total)
    if show_progress:
        sweeps = tqdm(
            sweeps, file=TqdmToLogger(logger, level=logging.INFO), mininterval=5
        )

    for sweep in sweeps:
        for i in range(1, n):
            A_new = A.copy()
            A_new[i] = 1 - A_new[i]
            A_guide = A.copy()
            A_guide[i] = 1
            accepted, z, log_post = propose(A_new, A_guide, z, log_post)
            if sweep >= hmc.burn_in:
                flip_proposed[i] += 1
                flip_accepted[i] += accepted
            if accepted:
                A = A_new

        accepted, z, log_post = propose(A, A, z, log_post)
        hmc_history.append(float(accepted))
        if sweep < hmc.burn_in:
            if (sweep + 1) % ADAPTATION_WINDOW == 0:
                window_rates.append(float(np.mean(hmc_history[-ADAPTATION_WINDOW:])))
                hmc = tune_hmc(hmc, window_rates)
            continue

        hmc_accepted += accepted
        k = sweep - hmc.burn_in
        u, x = target.split(z)
        samples_A[k] = A
        samples_theta[k] = np.cumsum(u, axis=0)
        if samples_x is not None:
            samples_x[k] = x
        samples_lp[k] = log_post

    with np.errstate(invalid="ignore"):
        flip_rate = np.where(flip_proposed > 0, flip_accepted / flip_proposed, np.nan)
    store = SampleStore(
        times=grid.times.copy(),
        theta_names=system.theta_names,
        A=samples_A,
        theta=samples_theta,
        log_posterior=samples_lp,
        x=samples_x,
        flip_acceptance=flip_rate,
        hmc_acceptance=hmc_accepted / max(hmc.n_samples, 1),
        step_size=hmc.epsilon,
    )
    logger.info(f"Sampler finished: {store.acceptance_report()}")
    lo, hi = hmc.acceptance_band
    if hmc.n_samples > 0 and not lo <= store.hmc_acceptance <= hi:
        logger.warning(
            f"HMC acceptance {store.hmc_acceptance:.2f} is outside [{lo}, {hi}], "
            f"consider a longer burn-in or another step size."
        )
    return store

import logging
from typing import Any, Tuple

import numpy as np

from ode_cpd.src.systems import OdeSystem, StepFunction
from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    IntegrationDivergenceError,
)

__all__ = ["integrate_rk4", "integrate_rk4_batch"]

logger = logging.getLogger(__name__)


def _rk4_step(system: OdeSystem, x, theta, psi, t: float, h: float):
    k1 = system.rhs(x, theta, psi, t)
    k2 = system.rhs(x + 0.5 * h * k1, theta, psi, t + 0.5 * h)
    k3 = system.rhs(x + 0.5 * h * k2, theta, psi, t + 0.5 * h)
    k4 = system.rhs(x + h * k3, theta, psi, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_grid(grid: np.ndarray, substeps: int) -> None:
    if grid.ndim != 1 or len(grid) < 1:
        raise ContractViolationError("The grid must be a non-empty 1-D array.")
    if np.any(np.diff(grid) <= 0):
        raise ContractViolationError("The grid must be strictly increasing.")
    if substeps < 1:
        raise ContractViolationError(f"substeps must be >= 1, got {substeps}.")


def _solve(
    system: OdeSystem,
    x0: np.ndarray,
    theta: StepFunction,
    psi: np.ndarray,
    grid: np.ndarray,
    substeps: int,
    batched: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    x = np.array(x0, dtype=float)
    out = np.empty(x.shape[:-1] + (len(grid), x.shape[-1]))
    out[..., 0, :] = x
    diverged = np.zeros(x.shape[:-1], dtype=bool)

    for j in range(len(grid) - 1):
        start, end = grid[j], grid[j + 1]
        # no RK4 substep may straddle a discontinuity of theta
        cuts = np.concatenate([[start], theta.breakpoints_between(start, end), [end]])
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            values = theta(0.5 * (lo + hi))
            share = (hi - lo) / (end - start)
            n_steps = max(1, int(np.ceil(substeps * share - 1e-9)))
            h = (hi - lo) / n_steps
            for s in range(n_steps):
                x = _rk4_step(system, x, values, psi, lo + s * h, h)
            finite = np.all(np.isfinite(x), axis=-1)
            if not np.all(finite):
                if not batched:
                    raise IntegrationDivergenceError(
                        f"{system.name} diverged between t={lo} and t={hi}.",
                        time=float(hi),
                    )
                diverged |= ~finite
                x[~finite] = np.nan
        out[..., j + 1, :] = x

    return out, diverged


def integrate_rk4(
    system: OdeSystem,
    x0: Any,
    theta: StepFunction,
    psi: Any,
    grid: Any,
    substeps: int = 10,
) -> np.ndarray:
    """Classical fourth-order Runge-Kutta on a fixed grid.

    Args:
        system: vector field
        x0: initial state at grid[0], shape (D,)
        theta: piecewise-constant parameter path
        psi: constant parameters, shape (Q,)
        grid: strictly increasing output times, shape (n,)
        substeps: RK4 steps per grid interval

    Returns:
        Trajectory of shape (n, D) with row 0 equal to x0.

    Raises:
        IntegrationDivergenceError: on overflow or NaN, with the failing time
    """

    grid = np.asarray(grid, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    psi = np.asarray(psi, dtype=float)
    _check_grid(grid, substeps)
    if x0.shape != (system.dim_states,):
        raise ContractViolationError(
            f"x0 must have shape ({system.dim_states},), got {x0.shape}."
        )
    if not np.all(np.isfinite(x0)):
        raise ContractViolationError("x0 must be finite.")

    with np.errstate(over="ignore", invalid="ignore"):
        trajectory, _ = _solve(system, x0, theta, psi, grid, substeps, batched=False)
    return trajectory


def integrate_rk4_batch(
    system: OdeSystem,
    x0: np.ndarray,
    theta_values: np.ndarray,
    breakpoints: Any,
    psi: np.ndarray,
    grid: Any,
    substeps: int = 10,
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrates a batch of initial states and parameter paths at once.

    Args:
        x0: shape (B, D)
        theta_values: segment values, shape (B, S, P)
        breakpoints: change times shared by the batch, shape (S - 1,)
        psi: shape (B, Q)

    Returns:
        Trajectories of shape (B, n, D) and a divergence mask of shape (B,).
        Diverged members are filled with NaN instead of raising.
    """

    grid = np.asarray(grid, dtype=float)
    _check_grid(grid, substeps)
    theta = StepFunction(breakpoints, np.asarray(theta_values, dtype=float))

    with np.errstate(over="ignore", invalid="ignore"):
        return _solve(
            system,
            np.asarray(x0, dtype=float),
            theta,
            np.asarray(psi, dtype=float),
            grid,
            substeps,
            batched=True,
        )


import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize

from ode_cpd.src.detectors.window_fit import (
    WindowFit,
    parameter_starts,
    remap_trajectory,
)
from ode_cpd.src.integrators import integrate_rk4_batch
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import OdeSystem

__all__ = ["RungeKuttaBackend", "profile_log_likelihood"]

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


def profile_log_likelihood(
    trajectories: np.ndarray, window: ObservationSet, sigma_floor: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian log-likelihood with every noise level profiled out.

    Args:
        trajectories: shape (B, n, D) on the window's observation times
        window: observations
        sigma_floor: lower bound of the profiled noise levels

    Returns:
        Log-likelihoods of shape (B,), -inf for non-finite trajectories, and the
        profiled noise levels of shape (B, D).
    """

    mask = window.mask
    residuals = np.where(mask, window.values - trajectories, 0.0)
    n_obs = mask.sum(axis=0)
    ssr = np.sum(residuals**2, axis=-2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma = np.sqrt(ssr / np.maximum(n_obs, 1))
    sigma = np.maximum(np.nan_to_num(sigma, nan=np.inf), sigma_floor)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        value = -0.5 * ssr / sigma**2 - n_obs * np.log(sigma) - 0.5 * n_obs * _LOG_2PI
    value = np.sum(value, axis=-1)
    value[~np.isfinite(value)] = -np.inf
    return value, sigma


class RungeKuttaBackend:
    """Brute-force window fits around RK4 solutions.

    Optimizes (x0, theta per segment, psi) with L-BFGS-B and batched
    central-difference gradients; the noise levels are profiled out.
    """

    name = "runge-kutta"

    def __init__(self, cfg: Any, system: OdeSystem):
        self.cfg = cfg
        self.system = system

    def _breakpoints(
        self, window: ObservationSet, change_index: Optional[int]
    ) -> np.ndarray:
        if change_index is None:
            return np.zeros(0)
        times = window.times
        return np.array([0.5 * (times[change_index - 1] + times[change_index])])

    def _unpack(self, params: np.ndarray, n_segments: int):
        D, P = self.system.dim_states, self.system.dim_theta
        x0 = params[..., :D]
        theta = params[..., D : D + n_segments * P].reshape(
            params.shape[:-1] + (n_segments, P)
        )
        psi = params[..., D + n_segments * P :]
        return x0, theta, psi

    def _evaluate(
        self,
        params: np.ndarray,
        window: ObservationSet,
        breakpoints: np.ndarray,
        n_segments: int,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        params = np.atleast_2d(params)
        x0, theta, psi = self._unpack(params, n_segments)
        trajectories, diverged = integrate_rk4_batch(
            self.system,
            x0,
            theta,
            breakpoints,
            psi,
            window.times,
            substeps=self.cfg.detector.rk_substeps,
        )
        value, sigma = profile_log_likelihood(
            trajectories, window, self.cfg.gp.sigma_floor
        )
        value[diverged] = -np.inf
        return value, sigma, trajectories

    def _bounds(
        self, psi: np.ndarray, n_segments: int, trust_region: Optional[float]
    ) -> List[Tuple[Optional[float], Optional[float]]]:
        bounds: List[Tuple[Optional[float], Optional[float]]] = [
            (None, None)
        ] * self.system.dim_states
        bounds += [tuple(b) for b in self.system.theta_bounds] * n_segments
        for q, value in enumerate(psi):
            lo, hi = self.system.psi_bounds[q]
            if trust_region is not None:
                width = trust_region * abs(value)
                lo, hi = max(lo, value - width), min(hi, value + width)
            bounds.append((lo, hi))
        return bounds

    def _optimize(
        self,
        window: ObservationSet,
        change_index: Optional[int],
        x0: np.ndarray,
        theta: np.ndarray,
        psi: np.ndarray,
        trust_region: Optional[float],
    ) -> WindowFit:
        n_segments = theta.shape[0]
        breakpoints = self._breakpoints(window, change_index)
        bounds = self._bounds(psi, n_segments, trust_region)
        lower = np.array([-np.inf if lo is None else lo for lo, _ in bounds])
        upper = np.array([np.inf if hi is None else hi for _, hi in bounds])
        start = np.clip(np.concatenate([x0, theta.ravel(), psi]), lower, upper)

        n = len(start)
        best: Dict[str, Any] = {"value": -np.inf, "params": start.copy()}

        def objective(params: np.ndarray) -> Tuple[float, np.ndarray]:
            steps = 1e-6 * np.maximum(1.0, np.abs(params))
            batch = np.tile(params, (2 * n + 1, 1))
            batch[1 : n + 1] += np.diag(steps)
            batch[n + 1 :] -= np.diag(steps)
            values, _, _ = self._evaluate(batch, window, breakpoints, n_segments)
            if not np.isfinite(values[0]):
                return np.inf, np.zeros(n)
            if values[0] > best["value"]:
                best["value"], best["params"] = float(values[0]), params.copy()
            grad = (values[1 : n + 1] - values[n + 1 :]) / (2 * steps)
            grad[~np.isfinite(grad)] = 0.0
            return -float(values[0]), -grad

        f0, _ = objective(start)
        converged, message, n_iter = False, "non-finite start", 0
        if np.isfinite(f0):
            result = optimize.minimize(
                objective,
                start,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={
                    "maxiter": self.cfg.detector.rk_maxiter,
                    "gtol": 1e-6 * max(1.0, abs(f0)),
                },
            )
            converged, message, n_iter = (
                bool(result.success),
                str(result.message),
                int(result.nit),
            )
        else:
            logger.warning(
                f"RK4 solution diverged at the start of a {n_segments}-segment fit."
            )

        value, sigma, trajectories = self._evaluate(
            best["params"], window, breakpoints, n_segments
        )
        x0, theta, psi = self._unpack(best["params"], n_segments)
        return WindowFit(
            value=float(value[0]),
            theta=theta.copy(),
            psi=psi.copy(),
            sigma=sigma[0],
            times=window.times.copy(),
            trajectory=trajectories[0],
            change_index=change_index,
            converged=converged,
            message=message,
            n_iter=n_iter,
        )

    def _x0_start(
        self, window: ObservationSet, warm: Optional[WindowFit]
    ) -> np.ndarray:
        first = np.zeros(window.n_components)
        for d in range(window.n_components):
            values = window.component_values(d)
            if len(values) > 0:
                first[d] = values[0]
        default = np.tile(first, (1, 1))
        return remap_trajectory(warm, window.times[:1], default)[0]

    def initialize(self, window: ObservationSet) -> WindowFit:
        n_starts = self.cfg.detector.n_init_starts
        theta_starts = parameter_starts(self.system.theta_bounds, n_starts, False)
        psi_starts = parameter_starts(self.system.psi_bounds, n_starts, True)
        x0 = self._x0_start(window, None)
        best: Optional[WindowFit] = None
        for theta, psi in zip(theta_starts, psi_starts):
            fit = self._optimize(window, None, x0, theta[None, :], psi, None)
            logger.debug(f"Initial start theta={theta} -> {fit.value:.4f}")
            if best is None or fit.value > best.value:
                best = fit
        return best

    def fit(
        self, window: ObservationSet, change_index: Optional[int], warm: WindowFit
    ) -> WindowFit:
        detector = self.cfg.detector
        trust_region = (
            detector.trust_region_fraction if detector.trust_region else None
        )
        n_segments = 1 if change_index is None else 2
        fit = self._optimize(
            window,
            change_index,
            self._x0_start(window, warm),
            warm.with_segments(n_segments).theta,
            warm.psi.copy(),
            trust_region,
        )
        if not np.isfinite(fit.value):
            logger.warning(
                f"RK4 fit diverged for change index {change_index}, "
                "scoring it as -inf."
            )
        return fit

    def refresh(self, window: ObservationSet, sigma: np.ndarray, full: bool) -> bool:
        return False

    def hyperparameters(self) -> Dict[str, List[float]]:
        return {}

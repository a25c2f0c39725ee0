import logging
from typing import Any, Dict, List, Optional

import numpy as np

from ode_cpd.src.detectors.window_fit import (
    WindowFit,
    parameter_starts,
    remap_trajectory,
)
from ode_cpd.src.gp import (
    GpKernelConfig,
    HyperparameterBounds,
    KernelMatrices,
    MeanFunction,
    fit_hyperparameters,
)
from ode_cpd.src.magi import (
    DiscretizationGrid,
    MagiState,
    build_kernels,
    initial_trajectory,
    maximize,
)
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import OdeSystem
from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    HyperparameterFitError,
    IllConditionedKernelError,
)

__all__ = ["MagiBackend"]

logger = logging.getLogger(__name__)


class MagiBackend:
    """Window fits by maximizing the manifold-constrained GP surrogate.

    Holds the per-stream kernel hyperparameters of every component.
    """

    name = "omagic"

    def __init__(self, cfg: Any, system: OdeSystem):
        self.cfg = cfg
        self.system = system
        self.kernel_configs: List[GpKernelConfig] = []
        self.kernel_bounds: List[Optional[HyperparameterBounds]] = []

    def _grid(self, window: ObservationSet) -> DiscretizationGrid:
        return DiscretizationGrid.from_observations(
            window.times, self.cfg.gp.n_midpoints
        )

    def kernel_matrices(
        self,
        window: ObservationSet,
        grid: DiscretizationGrid,
        warm: Optional[WindowFit],
    ) -> List[KernelMatrices]:
        configs = []
        for d, config in enumerate(self.kernel_configs):
            if window.n_observed(d) > 0:
                mean = MeanFunction.from_observations(
                    self.cfg.gp.mean, window.component_values(d)
                )
            elif warm is not None and self.cfg.gp.mean == "constant":
                mean = MeanFunction("constant", float(np.mean(warm.trajectory[:, d])))
            else:
                mean = MeanFunction("zero")
            configs.append(config.replace(mean=mean))
        return build_kernels(configs, grid, self.cfg.gp.jitter, self.cfg.gp.c_jitter)

    def _fit(
        self,
        window: ObservationSet,
        change_index: Optional[int],
        warm: Optional[WindowFit],
        parameters: Optional[Dict[str, np.ndarray]] = None,
        trust_region: Optional[float] = None,
        fit_sigma: bool = True,
    ) -> WindowFit:
        grid = self._grid(window)
        try:
            kernels = self.kernel_matrices(window, grid, warm)
        except IllConditionedKernelError as exc:
            if warm is None:
                raise
            logger.warning(f"Skipping window fit: {exc}")
            return self._failed_fit(change_index, warm, str(exc))

        boundaries = [] if change_index is None else [grid.obs_index[change_index]]
        n_segments = len(boundaries) + 1
        x = remap_trajectory(
            warm, grid.times, initial_trajectory(window, grid, kernels)
        )
        if parameters is not None:
            theta, psi, sigma = (parameters[k] for k in ("theta", "psi", "sigma"))
        else:
            start = warm.with_segments(n_segments)
            theta, psi, sigma = start.theta, start.psi, start.sigma
        warm_state = MagiState(
            x,
            np.broadcast_to(theta, (n_segments, self.system.dim_theta)).copy(),
            psi,
            sigma,
            boundaries,
        )
        result = maximize(
            window,
            grid,
            kernels,
            self.system,
            boundaries,
            warm_start=warm_state,
            trust_region=trust_region,
            fit_sigma=fit_sigma,
            sigma_floor=self.cfg.gp.sigma_floor,
            maxiter=self.cfg.detector.maxiter,
        )
        return WindowFit(
            value=result.value,
            theta=result.state.theta,
            psi=result.state.psi,
            sigma=result.state.sigma,
            times=grid.times,
            trajectory=result.state.x,
            change_index=change_index,
            converged=result.converged,
            message=result.message,
            n_iter=result.n_iter,
        )

    def _failed_fit(
        self, change_index: Optional[int], warm: WindowFit, message: str
    ) -> WindowFit:
        n_segments = 1 if change_index is None else 2
        return WindowFit(
            value=-np.inf,
            theta=warm.with_segments(n_segments).theta,
            psi=warm.psi.copy(),
            sigma=warm.sigma.copy(),
            times=warm.times,
            trajectory=warm.trajectory,
            change_index=change_index,
            converged=False,
            message=message,
        )

    def fit_kernels(self, window: ObservationSet) -> np.ndarray:
        """Fits the kernel hyperparameters of every component on `window`.

        Components with fewer than four observations take the median phi1
        and phi2 of the fitted ones.

        Returns:
            Noise levels per component from the GP fits, floored.
        """

        gp = self.cfg.gp
        fits: Dict[int, Any] = {}
        for d in range(window.n_components):
            if window.n_observed(d) < 4:
                continue
            values, times = window.component_values(d), window.component_times(d)
            bounds = HyperparameterBounds.from_data(
                values, times, gp.phi1_bounds, gp.phi2_bounds, gp.sigma_floor
            )
            fits[d] = (
                fit_hyperparameters(
                    values,
                    times,
                    bounds=bounds,
                    n_starts=gp.n_starts,
                    nu=gp.nu,
                    mean_kind=gp.mean,
                ),
                bounds,
            )
        if len(fits) == 0:
            raise ContractViolationError(
                "The initialization window needs a component with >= 4 observations."
            )

        phi1 = float(np.median([fit.phi1 for fit, _ in fits.values()]))
        phi2 = float(np.median([fit.phi2 for fit, _ in fits.values()]))
        self.kernel_configs, self.kernel_bounds = [], []
        sigma = np.ones(window.n_components)
        for d in range(window.n_components):
            if d in fits:
                fit, bounds = fits[d]
                self.kernel_configs.append(fit.kernel_config(gp.nu))
                self.kernel_bounds.append(bounds)
                sigma[d] = max(fit.sigma, gp.sigma_floor)
            else:
                self.kernel_configs.append(GpKernelConfig(phi1, phi2, gp.nu))
                self.kernel_bounds.append(None)
        logger.info(f"Initial kernel hyperparameters: {self.hyperparameters()}")
        return sigma

    def initialize(self, window: ObservationSet) -> WindowFit:
        """Fits the kernels per component, then the single-segment surrogate."""

        sigma = self.fit_kernels(window)
        best: Optional[WindowFit] = None
        n_starts = self.cfg.detector.n_init_starts
        theta_starts = parameter_starts(self.system.theta_bounds, n_starts, False)
        psi_starts = parameter_starts(self.system.psi_bounds, n_starts, True)
        for theta, psi in zip(theta_starts, psi_starts):
            fit = self._fit(
                window,
                None,
                None,
                parameters={"theta": theta, "psi": psi, "sigma": sigma},
            )
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
        return self._fit(
            window,
            change_index,
            warm,
            trust_region=trust_region,
            fit_sigma=detector.fit_sigma,
        )

    def refresh(self, window: ObservationSet, sigma: np.ndarray, full: bool) -> bool:
        """Refits phi1 (and phi2 when `full`) of every observed component.

        Noise levels stay at `sigma`. Failed refits keep the previous values.
        """

        gp = self.cfg.gp
        freeze = ("sigma",) if full else ("phi2", "sigma")
        refreshed = False
        for d, config in enumerate(self.kernel_configs):
            if self.kernel_bounds[d] is None or window.n_observed(d) < 4:
                continue
            try:
                fit = fit_hyperparameters(
                    window.component_values(d),
                    window.component_times(d),
                    config0=config,
                    bounds=self.kernel_bounds[d],
                    sigma0=float(sigma[d]),
                    freeze=freeze,
                    n_starts=gp.n_starts if full else 1,
                    nu=gp.nu,
                    mean_kind=gp.mean,
                )
            except (HyperparameterFitError, ContractViolationError) as exc:
                logger.warning(
                    f"Kernel refresh of component {d} failed, keeping "
                    f"phi1={config.phi1:.4g} phi2={config.phi2:.4g}: {exc}"
                )
                continue
            self.kernel_configs[d] = config.replace(phi1=fit.phi1, phi2=fit.phi2)
            refreshed = True
        return refreshed

    def hyperparameters(self) -> Dict[str, List[float]]:
        return {
            "phi1": [c.phi1 for c in self.kernel_configs],
            "phi2": [c.phi2 for c in self.kernel_configs],
        }

"""Matérn Gaussian-process kernels with derivative blocks and hyperparameter fits.

With ``l = |s - t|`` and ``u = sqrt(2 nu) l / phi2`` the kernel is

    k(l) = phi1^2 2^(1-nu) / Gamma(nu) * u^nu K_nu(u)

and the blocks of the joint (x, x') covariance on a grid are

    K   = k(l)
    'K  = dk/ds  = k'(l) sign(s - t)
    K'  = dk/dt  = -'K
    K'' = d2k/dsdt = -k''(l)
"""

import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, special

from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    HyperparameterFitError,
    IllConditionedKernelError,
)

__all__ = [
    "MeanFunction",
    "GpKernelConfig",
    "KernelMatrices",
    "HyperparameterBounds",
    "FitResult",
    "matern",
    "matern_profile",
    "build_kernel_matrices",
    "fit_hyperparameters",
    "gp_mean",
]

logger = logging.getLogger(__name__)

_SMALL_U = 1e-10
_CACHE_SIZE = 512
_core_cache: "OrderedDict[Tuple, Dict[str, Any]]" = OrderedDict()


@dataclass(frozen=True)
class MeanFunction:
    """mu(t) = a + b t for kind "linear", a for "constant" and 0 for "zero"."""

    kind: str = "constant"
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "zero", "linear"):
            raise ContractViolationError(f"Unknown mean function {self.kind}.")

    def __call__(self, grid: Any) -> Tuple[np.ndarray, np.ndarray]:
        grid = np.asarray(grid, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(grid), np.zeros_like(grid)
        if self.kind == "constant":
            return np.full_like(grid, self.a), np.zeros_like(grid)
        return self.a + self.b * grid, np.full_like(grid, self.b)

    @classmethod
    def from_observations(cls, kind: str, values: Any) -> "MeanFunction":
        values = np.asarray(values, dtype=float)
        values = values[np.isfinite(values)]
        if kind == "constant" and len(values) > 0:
            return cls("constant", float(np.mean(values)))
        if kind == "linear":
            raise ContractViolationError(
                "A linear mean needs explicit coefficients."
            )
        return cls(kind if kind != "constant" else "zero")


@dataclass(frozen=True)
class GpKernelConfig:
    phi1: float
    phi2: float
    nu: float = 2.01
    mean: MeanFunction = field(default_factory=MeanFunction)

    def __post_init__(self):
        for name in ("phi1", "phi2", "nu"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ContractViolationError(
                    f"{name} must be positive and finite, got {value}."
                )
        if self.nu <= 1:
            raise ContractViolationError(
                f"nu must exceed 1 for a differentiable process, got {self.nu}."
            )

    def replace(self, **kwargs) -> "GpKernelConfig":
        return dataclasses.replace(self, **kwargs)


def matern_profile(
    phi1: float, phi2: float, nu: float, distance: Any
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matérn kernel and its first two derivatives as functions of the distance.

    Returns:
        k(l), k'(l), k''(l) elementwise, using the analytic limits at l = 0.
    """

    distance = np.abs(np.asarray(distance, dtype=float))
    scale = np.sqrt(2.0 * nu) / phi2
    u = scale * distance
    c = phi1**2 * 2.0 ** (1.0 - nu) / special.gamma(nu)

    small = u < _SMALL_U
    us = np.where(small, 1.0, u)
    kv_nu = special.kv(nu, us)
    kv_nu1 = special.kv(nu - 1.0, us)
    kv_nu2 = special.kv(nu - 2.0, us)
    u_nu = us**nu

    g = c * u_nu * kv_nu
    dg = -c * u_nu * kv_nu1
    ddg = c * (u_nu * kv_nu2 - us ** (nu - 1.0) * kv_nu1)

    k = np.where(small, phi1**2, g)
    dk = np.where(small, 0.0, dg * scale)
    ddk = np.where(small, -(phi1**2) * nu / ((nu - 1.0) * phi2**2), ddg * scale**2)
    # kv underflows to 0 far in the tail
    return np.nan_to_num(k), np.nan_to_num(dk), np.nan_to_num(ddk)


def matern(config: GpKernelConfig, s: float, t: float) -> float:
    """Matérn covariance between times s and t."""
    if not (np.isfinite(s) and np.isfinite(t)):
        raise ContractViolationError(f"Kernel arguments must be finite, got {s}, {t}.")
    k, _, _ = matern_profile(config.phi1, config.phi2, config.nu, s - t)
    return float(k)


def gp_mean(config: GpKernelConfig, grid: Any) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and derivative of the mean of the process on `grid`."""
    return config.mean(grid)


@dataclass(frozen=True, eq=False)
class KernelMatrices:
    """Kernel blocks of one component on a discretization grid.

    K and C are stored without jitter; every solve and log-determinant uses
    K + jitter * I and C + c_jitter * I.
    """

    config: GpKernelConfig
    grid: np.ndarray
    K: np.ndarray
    dK: np.ndarray
    Kd: np.ndarray
    ddK: np.ndarray
    m: np.ndarray
    C: np.ndarray
    K_inv: np.ndarray
    C_inv: np.ndarray
    log_det_K: float
    log_det_C: float
    jitter: float
    c_jitter: float
    mu: np.ndarray
    dmu: np.ndarray

    @property
    def n(self) -> int:
        return len(self.grid)


def _factorize(
    matrix: np.ndarray, start: float, stop: float, what: str
) -> Tuple[Tuple[np.ndarray, bool], float]:
    jitter = start
    eye = np.eye(len(matrix))
    while True:
        try:
            return linalg.cho_factor(matrix + jitter * eye, lower=True), jitter
        except (linalg.LinAlgError, ValueError):
            jitter *= 10.0
            if jitter > stop * (1 + 1e-9):
                break
    with np.errstate(all="ignore"):
        condition = float(np.linalg.cond(matrix))
    raise IllConditionedKernelError(
        f"Cholesky factorization of {what} failed with jitter up to {stop:.3g}.",
        condition_number=condition,
    )


def _log_det(chol: Tuple[np.ndarray, bool]) -> float:
    return float(2.0 * np.sum(np.log(np.diag(chol[0]))))


def _core_matrices(
    phi1: float,
    phi2: float,
    nu: float,
    grid: np.ndarray,
    jitter: Tuple[float, float],
    c_jitter: float,
) -> Dict[str, Any]:
    key = (
        phi1,
        phi2,
        nu,
        tuple(jitter),
        c_jitter,
        np.round(grid - grid[0], 12).tobytes(),
    )
    if key in _core_cache:
        _core_cache.move_to_end(key)
        return _core_cache[key]

    diff = grid[:, None] - grid[None, :]
    k, dk, ddk = matern_profile(phi1, phi2, nu, diff)
    sign = np.sign(diff)
    K = k
    dK = dk * sign
    Kd = -dK
    ddK = -ddk

    K_chol, K_jitter = _factorize(
        K, jitter[0] * phi1**2, jitter[1] * phi1**2, "K"
    )
    K_inv = linalg.cho_solve(K_chol, np.eye(len(grid)))
    m = dK @ K_inv
    C = ddK - m @ Kd
    C = 0.5 * (C + C.T)

    c_scale = float(np.mean(np.diag(C)))
    c_scale = c_scale if c_scale > 0 else float(np.mean(np.diag(ddK)))
    C_chol, C_jitter = _factorize(
        C, c_jitter * c_scale, max(1e-2, c_jitter) * c_scale, "C"
    )
    C_inv = linalg.cho_solve(C_chol, np.eye(len(grid)))

    core = {
        "K": K,
        "dK": dK,
        "Kd": Kd,
        "ddK": ddK,
        "m": m,
        "C": C,
        "K_inv": K_inv,
        "C_inv": C_inv,
        "log_det_K": _log_det(K_chol),
        "log_det_C": _log_det(C_chol),
        "jitter": K_jitter,
        "c_jitter": C_jitter,
    }
    for value in core.values():
        if isinstance(value, np.ndarray):
            value.setflags(write=False)

    _core_cache[key] = core
    if len(_core_cache) > _CACHE_SIZE:
        _core_cache.popitem(last=False)
    return core


def build_kernel_matrices(
    config: GpKernelConfig,
    grid: Any,
    jitter: Sequence[float] = (1e-7, 1e-3),
    c_jitter: float = 1e-6,
) -> KernelMatrices:
    """Builds the kernel blocks, the derivative operator m and C on `grid`.

    Args:
        config: kernel hyperparameters and mean function
        grid: sorted distinct times, at least two
        jitter: initial and maximal diagonal jitter of K relative to phi1^2
        c_jitter: initial diagonal jitter of C relative to its mean diagonal

    Raises:
        IllConditionedKernelError: if K or C cannot be factorized
    """

    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2:
        raise ContractViolationError("The kernel grid needs at least two points.")
    if not np.all(np.isfinite(grid)) or np.any(np.diff(grid) <= 0):
        raise ContractViolationError("The kernel grid must be finite and increasing.")

    core = _core_matrices(
        float(config.phi1),
        float(config.phi2),
        float(config.nu),
        grid,
        (float(jitter[0]), float(jitter[1])),
        float(c_jitter),
    )
    mu, dmu = config.mean(grid)
    return KernelMatrices(config=config, grid=grid, mu=mu, dmu=dmu, **core)


@dataclass(frozen=True)
class HyperparameterBounds:
    phi1: Tuple[float, float]
    phi2: Tuple[float, float]
    sigma: Tuple[float, float]

    def as_log_bounds(self) -> List[Tuple[float, float]]:
        return [
            (float(np.log(lo)), float(np.log(hi)))
            for lo, hi in (self.phi1, self.phi2, self.sigma)
        ]

    @classmethod
    def from_data(
        cls,
        values: Any,
        times: Any,
        phi1_bounds: Sequence[float] = (1e-2, 1e2),
        phi2_bounds: Sequence[float] = (0.5, 200.0),
        sigma_floor: float = 1e-3,
    ) -> "HyperparameterBounds":
        """Bounds relative to the data scale and the median observation spacing."""

        values = np.asarray(values, dtype=float)
        times = np.asarray(times, dtype=float)
        scale_y = float(np.std(values))
        if not scale_y > 0:
            scale_y = max(float(np.max(np.abs(values), initial=0.0)), 1.0)
        spacing = float(np.median(np.diff(times))) if len(times) > 1 else 1.0
        return cls(
            phi1=(scale_y * phi1_bounds[0], scale_y * phi1_bounds[1]),
            phi2=(spacing * phi2_bounds[0], spacing * phi2_bounds[1]),
            sigma=(sigma_floor, max(scale_y, 10.0 * sigma_floor)),
        )


@dataclass
class FitResult:
    phi1: float
    phi2: float
    sigma: float
    neg_log_likelihood: float
    mean: MeanFunction
    success: bool
    report: List[Dict[str, Any]] = field(default_factory=list)

    def kernel_config(self, nu: float = 2.01) -> GpKernelConfig:
        return GpKernelConfig(self.phi1, self.phi2, nu, self.mean)


_HYPERPARAMETERS = ("phi1", "phi2", "sigma")


def _marginal_nll(
    log_params: np.ndarray,
    residuals: np.ndarray,
    distance: np.ndarray,
    nu: float,
) -> Tuple[float, np.ndarray]:
    phi1, phi2, sigma = np.exp(log_params)
    n = len(residuals)
    k, dk, _ = matern_profile(phi1, phi2, nu, distance)
    cov = k + (sigma**2 + 1e-10 * phi1**2) * np.eye(n)
    chol = linalg.cho_factor(cov, lower=True)
    alpha = linalg.cho_solve(chol, residuals)
    nll = 0.5 * residuals @ alpha + 0.5 * _log_det(chol) + 0.5 * n * np.log(2 * np.pi)

    inner = linalg.cho_solve(chol, np.eye(n)) - np.outer(alpha, alpha)
    derivatives = (2.0 * k, -dk * distance, 2.0 * sigma**2 * np.eye(n))
    grad = np.array([0.5 * np.sum(inner * d) for d in derivatives])
    return float(nll), grad


def fit_hyperparameters(
    y_d: Any,
    tau_d: Any,
    config0: Optional[GpKernelConfig] = None,
    bounds: Optional[HyperparameterBounds] = None,
    sigma0: Optional[float] = None,
    freeze: Sequence[str] = (),
    n_starts: int = 8,
    nu: float = 2.01,
    mean_kind: str = "constant",
) -> FitResult:
    """Maximizes the Gaussian marginal likelihood of one component.

    The covariance of `y_d` is K(tau_d, tau_d) + sigma^2 I around a constant
    (observation average) or zero mean. Optimization runs over
    log(phi1, phi2, sigma) with L-BFGS-B from several starts.

    Args:
        y_d: observed values
        tau_d: observation times
        config0: incumbent hyperparameters, required for frozen phi1/phi2
        bounds: box for (phi1, phi2, sigma); data-relative bounds by default
        sigma0: incumbent noise level, required if sigma is frozen
        freeze: names out of ("phi1", "phi2", "sigma") held at their incumbent
        n_starts: number of length-scale starts
        nu: smoothness
        mean_kind: "constant" or "zero"

    Returns:
        The best fit; frozen coordinates are returned unchanged.

    Raises:
        HyperparameterFitError: if every start fails
    """

    y_d = np.asarray(y_d, dtype=float)
    tau_d = np.asarray(tau_d, dtype=float)
    finite = np.isfinite(y_d)
    y_d, tau_d = y_d[finite], tau_d[finite]
    if len(y_d) < 4:
        raise ContractViolationError(
            f"Fitting kernel hyperparameters needs >= 4 observations, got {len(y_d)}."
        )
    unknown = set(freeze) - set(_HYPERPARAMETERS)
    if unknown:
        raise ContractViolationError(
            f"Cannot freeze unknown hyperparameters {unknown}."
        )
    if ("phi1" in freeze or "phi2" in freeze) and config0 is None:
        raise ContractViolationError("Freezing phi1 or phi2 needs config0.")
    if "sigma" in freeze and sigma0 is None:
        raise ContractViolationError("Freezing sigma needs sigma0.")

    if bounds is None:
        bounds = HyperparameterBounds.from_data(y_d, tau_d)
    mean = MeanFunction.from_observations(mean_kind, y_d)
    residuals = y_d - mean(tau_d)[0]
    distance = np.abs(tau_d[:, None] - tau_d[None, :])

    incumbent = {
        "phi1": config0.phi1 if config0 is not None else None,
        "phi2": config0.phi2 if config0 is not None else None,
        "sigma": sigma0,
    }
    free = [k for k, name in enumerate(_HYPERPARAMETERS) if name not in freeze]
    log_bounds = bounds.as_log_bounds()

    scale_y = float(np.std(y_d)) or 1.0
    span = float(tau_d[-1] - tau_d[0]) or 1.0
    starts = []
    for phi2 in (span / 4.0) * np.geomspace(1e-2, 1e2, n_starts):
        start = np.clip(
            np.log([scale_y, phi2, 0.1 * scale_y]), *np.array(log_bounds).T
        )
        for k, name in enumerate(_HYPERPARAMETERS):
            if name in freeze:
                start[k] = np.log(incumbent[name])
        starts.append(start)
    starts = list(np.unique(np.array(starts), axis=0))

    def objective(free_params: np.ndarray, base: np.ndarray):
        params = base.copy()
        params[free] = free_params
        try:
            with np.errstate(all="ignore"):
                nll, grad = _marginal_nll(params, residuals, distance, nu)
        except (linalg.LinAlgError, ValueError):
            return np.inf, np.zeros(len(free))
        if not np.isfinite(nll):
            return np.inf, np.zeros(len(free))
        return nll, grad[free]

    report: List[Dict[str, Any]] = []
    best: Optional[Tuple[float, np.ndarray, bool]] = None
    for start in starts:
        entry: Dict[str, Any] = {"start": np.exp(start).tolist()}
        if len(free) == 0:
            value, _ = objective(np.empty(0), start)
            params, success, message = start, bool(np.isfinite(value)), "all frozen"
        else:
            try:
                result = optimize.minimize(
                    objective,
                    start[free],
                    args=(start,),
                    jac=True,
                    method="L-BFGS-B",
                    bounds=[log_bounds[k] for k in free],
                )
            except (ValueError, FloatingPointError) as exc:
                entry.update(success=False, message=str(exc), nll=np.inf)
                report.append(entry)
                continue
            params = start.copy()
            params[free] = result.x
            value, success, message = float(result.fun), bool(result.success), str(
                result.message
            )
        entry.update(
            params=np.exp(params).tolist(),
            nll=value,
            success=success,
            message=message,
        )
        report.append(entry)
        if np.isfinite(value) and (best is None or value < best[0]):
            best = (value, params, success)

    if best is None:
        raise HyperparameterFitError(
            f"All {len(starts)} hyperparameter starts failed.", diagnostics=report
        )

    value, params, success = best
    fitted = {}
    for k, name in enumerate(_HYPERPARAMETERS):
        fitted[name] = incumbent[name] if name in freeze else float(np.exp(params[k]))
    logger.debug(
        f"Fitted phi1={fitted['phi1']:.4g} phi2={fitted['phi2']:.4g} "
        f"sigma={fitted['sigma']:.4g} nll={value:.4g}"
    )
    return FitResult(
        phi1=fitted["phi1"],
        phi2=fitted["phi2"],
        sigma=fitted["sigma"],
        neg_log_likelihood=value,
        mean=mean,
        success=success,
        report=report,
    )

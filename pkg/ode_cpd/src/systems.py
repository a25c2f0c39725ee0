"""ODE systems, piecewise-constant parameter paths and the systems factory.

Every vector field is vectorized over leading batch dimensions: ``x`` has shape
``(..., D)``, ``theta`` ``(..., P)`` and ``psi`` ``(..., Q)``; the three are
broadcast against each other. Jacobians are returned with the trailing shape
``(D, D)``, ``(D, P)`` and ``(D, Q)``.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    NumericalDomainError,
    ObservationDomainError,
)

__all__ = [
    "OdeSystem",
    "Seird",
    "LotkaVolterra",
    "Lorenz",
    "ExponentialGrowth",
    "LogTransformedSystem",
    "StepFunction",
    "Systems",
    "eval_rhs",
    "seird_recovered",
]

logger = logging.getLogger(__name__)


class OdeSystem:
    """Base class of a vector field f(x, theta, psi, t)."""

    name: str = ""
    state_names: Tuple[str, ...] = ()
    theta_names: Tuple[str, ...] = ()
    psi_names: Tuple[str, ...] = ()
    positive: bool = False

    default_theta_bounds: Tuple[Tuple[float, float], ...] = ()
    default_psi_bounds: Tuple[Tuple[float, float], ...] = ()

    def __init__(
        self,
        theta_bounds: Optional[Sequence[Sequence[float]]] = None,
        psi_bounds: Optional[Sequence[Sequence[float]]] = None,
    ):
        if theta_bounds is None:
            theta_bounds = self.default_theta_bounds
        if psi_bounds is None:
            psi_bounds = self.default_psi_bounds
        self.theta_bounds = np.asarray(theta_bounds, dtype=float).reshape(
            self.dim_theta, 2
        )
        self.psi_bounds = np.asarray(psi_bounds, dtype=float).reshape(self.dim_psi, 2)
        if np.any(self.theta_bounds[:, 0] >= self.theta_bounds[:, 1]):
            raise ContractViolationError(
                f"Invalid parameter bounds {self.theta_bounds.tolist()}"
            )

    @property
    def dim_states(self) -> int:
        return len(self.state_names)

    @property
    def dim_theta(self) -> int:
        return len(self.theta_names)

    @property
    def dim_psi(self) -> int:
        return len(self.psi_names)

    @classmethod
    def dimensions(cls) -> Dict[str, int]:
        return {
            "states": len(cls.state_names),
            "theta": len(cls.theta_names),
            "psi": len(cls.psi_names),
        }

    def rhs(self, x: np.ndarray, theta: np.ndarray, psi: np.ndarray, t: Any = 0.0):
        raise NotImplementedError

    def rhs_jacobian_x(self, x, theta, psi, t=0.0) -> Optional[np.ndarray]:
        return None

    def rhs_jacobian_theta(self, x, theta, psi, t=0.0) -> Optional[np.ndarray]:
        return None

    def rhs_jacobian_psi(self, x, theta, psi, t=0.0) -> Optional[np.ndarray]:
        return None

    @property
    def has_analytic_jacobians(self) -> bool:
        point = (
            np.ones(self.dim_states),
            np.ones(self.dim_theta),
            np.ones(self.dim_psi),
        )
        return all(
            jac(*point) is not None
            for jac in (
                self.rhs_jacobian_x,
                self.rhs_jacobian_theta,
                self.rhs_jacobian_psi,
            )
        )

    def jacobian_x(self, x, theta, psi, t=0.0) -> np.ndarray:
        jac = self.rhs_jacobian_x(x, theta, psi, t)
        if jac is None:
            jac = self._finite_difference(x, theta, psi, t, wrt=0)
        return jac

    def jacobian_theta(self, x, theta, psi, t=0.0) -> np.ndarray:
        jac = self.rhs_jacobian_theta(x, theta, psi, t)
        if jac is None:
            jac = self._finite_difference(x, theta, psi, t, wrt=1)
        return jac

    def jacobian_psi(self, x, theta, psi, t=0.0) -> np.ndarray:
        jac = self.rhs_jacobian_psi(x, theta, psi, t)
        if jac is None:
            jac = self._finite_difference(x, theta, psi, t, wrt=2)
        return jac

    def finite_difference_jacobians(
        self, x, theta, psi, t=0.0, eps: float = 1e-6
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Central finite differences of rhs w.r.t. x, theta and psi."""
        return tuple(  # type: ignore[return-value]
            self._finite_difference(x, theta, psi, t, wrt=k, eps=eps)
            for k in range(3)
        )

    def _finite_difference(self, x, theta, psi, t, wrt: int, eps: float = 1e-6):
        args = [
            np.asarray(x, dtype=float),
            np.asarray(theta, dtype=float),
            np.asarray(psi, dtype=float),
        ]
        f0 = self.rhs(*args, t)
        n = args[wrt].shape[-1]
        jac = np.zeros(f0.shape + (n,))
        for j in range(n):
            step = eps * np.maximum(1.0, np.abs(args[wrt][..., j]))
            plus = [a.copy() for a in args]
            minus = [a.copy() for a in args]
            plus[wrt][..., j] += step
            minus[wrt][..., j] -= step
            diff = self.rhs(*plus, t) - self.rhs(*minus, t)
            jac[..., j] = diff / (2 * step)[..., None]
        return jac

    def _jacobian_shape(self, x, theta, psi, n: int) -> Tuple[int, ...]:
        batch = np.broadcast_shapes(
            np.shape(x)[:-1], np.shape(theta)[:-1], np.shape(psi)[:-1]
        )
        return batch + (self.dim_states, n)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r})"


class Seird(OdeSystem):
    name = "seird"
    state_names = ("S", "E", "I", "D")
    theta_names = ("beta", "p_d")
    psi_names = ("v_e", "v_i")
    positive = True

    default_theta_bounds = ((1e-3, 2.0), (1e-4, 0.5))
    default_psi_bounds = ((1e-4, 10.0), (1e-4, 10.0))

    def __init__(self, population: float = 1001550.0, **kwargs):
        super().__init__(**kwargs)
        self.population = float(population)

    def rhs(self, x, theta, psi, t=0.0):
        S, E, I, D = (x[..., k] for k in range(4))
        beta, p_d = theta[..., 0], theta[..., 1]
        v_e, v_i = psi[..., 0], psi[..., 1]
        infections = beta * I * S / self.population
        return np.stack(
            np.broadcast_arrays(
                -infections,
                infections - v_e * E,
                v_e * E - v_i * I,
                v_i * I * p_d,
            ),
            axis=-1,
        )

    def rhs_jacobian_x(self, x, theta, psi, t=0.0):
        S, E, I = x[..., 0], x[..., 1], x[..., 2]
        beta, p_d = theta[..., 0], theta[..., 1]
        v_e, v_i = psi[..., 0], psi[..., 1]
        N = self.population
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 4))
        jac[..., 0, 0] = -beta * I / N
        jac[..., 0, 2] = -beta * S / N
        jac[..., 1, 0] = beta * I / N
        jac[..., 1, 1] = -v_e
        jac[..., 1, 2] = beta * S / N
        jac[..., 2, 1] = v_e
        jac[..., 2, 2] = -v_i
        jac[..., 3, 2] = v_i * p_d
        return jac

    def rhs_jacobian_theta(self, x, theta, psi, t=0.0):
        S, I = x[..., 0], x[..., 2]
        v_i = psi[..., 1]
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 2))
        jac[..., 0, 0] = -I * S / self.population
        jac[..., 1, 0] = I * S / self.population
        jac[..., 3, 1] = v_i * I
        return jac

    def rhs_jacobian_psi(self, x, theta, psi, t=0.0):
        E, I = x[..., 1], x[..., 2]
        p_d = theta[..., 1]
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 2))
        jac[..., 1, 0] = -E
        jac[..., 2, 0] = E
        jac[..., 2, 1] = -I
        jac[..., 3, 1] = I * p_d
        return jac


class LotkaVolterra(OdeSystem):
    name = "lotka_volterra"
    state_names = ("prey", "predator")
    theta_names = ("gamma",)
    psi_names = ("alpha", "beta", "delta")
    positive = True

    default_theta_bounds = ((0.05, 3.0),)
    default_psi_bounds = ((1e-3, 10.0), (1e-3, 10.0), (1e-3, 10.0))

    def rhs(self, x, theta, psi, t=0.0):
        prey, predator = x[..., 0], x[..., 1]
        gamma = theta[..., 0]
        alpha, beta, delta = psi[..., 0], psi[..., 1], psi[..., 2]
        return np.stack(
            np.broadcast_arrays(
                alpha * prey - beta * prey * predator,
                delta * prey * predator - gamma * predator,
            ),
            axis=-1,
        )

    def rhs_jacobian_x(self, x, theta, psi, t=0.0):
        prey, predator = x[..., 0], x[..., 1]
        gamma = theta[..., 0]
        alpha, beta, delta = psi[..., 0], psi[..., 1], psi[..., 2]
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 2))
        jac[..., 0, 0] = alpha - beta * predator
        jac[..., 0, 1] = -beta * prey
        jac[..., 1, 0] = delta * predator
        jac[..., 1, 1] = delta * prey - gamma
        return jac

    def rhs_jacobian_theta(self, x, theta, psi, t=0.0):
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 1))
        jac[..., 1, 0] = -x[..., 1]
        return jac

    def rhs_jacobian_psi(self, x, theta, psi, t=0.0):
        prey, predator = x[..., 0], x[..., 1]
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 3))
        jac[..., 0, 0] = prey
        jac[..., 0, 1] = -prey * predator
        jac[..., 1, 2] = prey * predator
        return jac


class Lorenz(OdeSystem):
    name = "lorenz"
    state_names = ("x", "y", "z")
    theta_names = ("rho",)
    psi_names = ("sigma", "beta")

    default_theta_bounds = ((1.0, 50.0),)
    default_psi_bounds = ((1e-3, 50.0), (1e-3, 20.0))

    def rhs(self, x, theta, psi, t=0.0):
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        rho = theta[..., 0]
        sigma, beta = psi[..., 0], psi[..., 1]
        return np.stack(
            np.broadcast_arrays(
                sigma * (v - u),
                u * (rho - w) - v,
                u * v - beta * w,
            ),
            axis=-1,
        )

    def rhs_jacobian_x(self, x, theta, psi, t=0.0):
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        rho = theta[..., 0]
        sigma, beta = psi[..., 0], psi[..., 1]
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 3))
        jac[..., 0, 0] = -sigma
        jac[..., 0, 1] = sigma
        jac[..., 1, 0] = rho - w
        jac[..., 1, 1] = -1.0
        jac[..., 1, 2] = -u
        jac[..., 2, 0] = v
        jac[..., 2, 1] = u
        jac[..., 2, 2] = -beta
        return jac

    def rhs_jacobian_theta(self, x, theta, psi, t=0.0):
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 1))
        jac[..., 1, 0] = x[..., 0]
        return jac

    def rhs_jacobian_psi(self, x, theta, psi, t=0.0):
        u, v, w = x[..., 0], x[..., 1], x[..., 2]
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 2))
        jac[..., 0, 0] = v - u
        jac[..., 2, 1] = -w
        return jac


class ExponentialGrowth(OdeSystem):
    """x' = theta * x"""

    name = "exponential"
    state_names = ("x",)
    theta_names = ("rate",)
    psi_names = ()
    positive = True

    default_theta_bounds = ((-10.0, 10.0),)
    default_psi_bounds = ()

    def rhs(self, x, theta, psi, t=0.0):
        return theta[..., :1] * x

    def rhs_jacobian_x(self, x, theta, psi, t=0.0):
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 1))
        jac[..., 0, 0] = theta[..., 0]
        return jac

    def rhs_jacobian_theta(self, x, theta, psi, t=0.0):
        jac = np.zeros(self._jacobian_shape(x, theta, psi, 1))
        jac[..., 0, 0] = x[..., 0]
        return jac

    def rhs_jacobian_psi(self, x, theta, psi, t=0.0):
        return np.zeros(self._jacobian_shape(x, theta, psi, 0))


class LogTransformedSystem(OdeSystem):
    """
    Dynamics of z = log(x) for a positive base system:
    dz/dt = f(exp(z)) / exp(z).
    """

    positive = False

    def __init__(self, base: OdeSystem):
        if not base.positive:
            raise ContractViolationError(
                f"{base.name} has no positive state space to take the log of."
            )
        self.base = base
        self.name = f"log_{base.name}"
        self.state_names = tuple(f"log_{n}" for n in base.state_names)
        self.theta_names = base.theta_names
        self.psi_names = base.psi_names
        self.theta_bounds = base.theta_bounds
        self.psi_bounds = base.psi_bounds

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x[np.isfinite(x)] <= 0):
            raise ObservationDomainError(
                f"The log transform of {self.base.name} needs positive values."
            )
        return np.log(x)

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.exp(z)

    def rhs(self, z, theta, psi, t=0.0):
        x = np.exp(z)
        return self.base.rhs(x, theta, psi, t) / x

    def rhs_jacobian_x(self, z, theta, psi, t=0.0):
        x = np.exp(z)
        base_jac = self.base.jacobian_x(x, theta, psi, t)
        f = self.base.rhs(x, theta, psi, t)
        jac = base_jac * x[..., None, :] / x[..., :, None]
        idx = np.arange(self.dim_states)
        jac[..., idx, idx] -= f / x
        return jac

    def rhs_jacobian_theta(self, z, theta, psi, t=0.0):
        x = np.exp(z)
        return self.base.jacobian_theta(x, theta, psi, t) / x[..., :, None]

    def rhs_jacobian_psi(self, z, theta, psi, t=0.0):
        x = np.exp(z)
        return self.base.jacobian_psi(x, theta, psi, t) / x[..., :, None]


class StepFunction:
    """Right-continuous piecewise-constant parameter path.

    Args:
        breakpoints: strictly increasing change times, shape (K,)
        values: segment values, shape (K + 1, P) or (..., K + 1, P) for a batch
            of paths sharing the same breakpoints
    """

    def __init__(self, breakpoints: Sequence[float], values: Any):
        self.breakpoints = np.asarray(breakpoints, dtype=float).reshape(-1)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[None, :]
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ContractViolationError("Breakpoints must be strictly increasing.")
        if self.values.shape[-2] != len(self.breakpoints) + 1:
            raise ContractViolationError(
                f"{len(self.breakpoints)} breakpoints need "
                f"{len(self.breakpoints) + 1} segment values, "
                f"got {self.values.shape[-2]}."
            )

    @classmethod
    def constant(cls, values: Any) -> "StepFunction":
        values = np.asarray(values, dtype=float)
        return cls([], values[..., None, :])

    @property
    def n_segments(self) -> int:
        return len(self.breakpoints) + 1

    def segment_index(self, t: Any) -> Any:
        return np.searchsorted(self.breakpoints, t, side="right")

    def __call__(self, t: float) -> np.ndarray:
        return self.values[..., self.segment_index(t), :]

    def within_bounds(self, bounds: np.ndarray) -> bool:
        bounds = np.asarray(bounds, dtype=float)
        return bool(
            np.all(self.values >= bounds[:, 0]) and np.all(self.values <= bounds[:, 1])
        )

    def breakpoints_between(self, start: float, end: float) -> np.ndarray:
        mask = (self.breakpoints > start) & (self.breakpoints < end)
        return self.breakpoints[mask]

    def __repr__(self) -> str:
        return (
            f"StepFunction(breakpoints={self.breakpoints.tolist()}, "
            f"values={self.values.tolist()})"
        )


def eval_rhs(
    system: OdeSystem,
    x: Sequence[float],
    theta: Sequence[float],
    psi: Sequence[float],
    t: float = 0.0,
) -> np.ndarray:
    """Evaluates f(x, theta, psi, t) with input validation.

    Raises:
        ContractViolationError: on dimension mismatch or non-finite parameters
        NumericalDomainError: if a component of the output is not finite
    """

    x = np.array(x, dtype=float)
    theta = np.array(theta, dtype=float)
    psi = np.array(psi, dtype=float)
    for name, value, dim in [
        ("x", x, system.dim_states),
        ("theta", theta, system.dim_theta),
        ("psi", psi, system.dim_psi),
    ]:
        if value.shape != (dim,):
            raise ContractViolationError(
                f"{system.name} expects {name} of length {dim}, got shape "
                f"{value.shape}."
            )
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(psi))):
        raise ContractViolationError("Parameter values must be finite.")

    with np.errstate(all="ignore"):
        out = system.rhs(x, theta, psi, t)
    bad = np.flatnonzero(~np.isfinite(out))
    if len(bad) > 0:
        names = [system.state_names[d] for d in bad]
        raise NumericalDomainError(
            f"Non-finite derivative of component(s) {names} at t={t}.",
            component=int(bad[0]),
        )
    return out


def seird_recovered(trajectory: np.ndarray, population: float) -> np.ndarray:
    """Cumulative recovered compartment by conservation, R = N - S - E - I - D."""
    return population - np.sum(trajectory, axis=-1)


class Systems:
    """Systems factory."""

    _systems = {
        "seird": Seird,
        "lotka_volterra": LotkaVolterra,
        "lorenz": Lorenz,
        "exponential": ExponentialGrowth,
    }

    @classmethod
    def names(cls) -> List[str]:
        return sorted(cls._systems.keys())

    @classmethod
    def get(cls, name: str) -> Any:
        """Access to Systems.

        Args:
            name: system name
        Returns:
            A class to build the system
        """

        return cls._systems.get(name)

    @classmethod
    def from_cfg(cls, cfg: Any) -> OdeSystem:
        """Builds the system described by `cfg.system` in its physical domain."""

        system_cls = cls.get(cfg.system.name)
        if system_cls is None:
            raise NotImplementedError(f"System {cfg.system.name} not implemented")
        kwargs: Dict[str, Any] = {}
        if len(cfg.system.theta_low) > 0:
            kwargs["theta_bounds"] = list(
                zip(cfg.system.theta_low, cfg.system.theta_high)
            )
        if system_cls is Seird:
            kwargs["population"] = cfg.system.population
        return system_cls(**kwargs)

    @classmethod
    def inference_system(cls, cfg: Any, system: OdeSystem) -> OdeSystem:
        """Wraps `system` in the log transform when the config asks for it."""

        if cfg.system.log_transform:
            return LogTransformedSystem(system)
        return system

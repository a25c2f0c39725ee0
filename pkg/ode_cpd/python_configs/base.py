import dataclasses
import logging
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Optional, Set, Tuple

from ode_cpd.src import possible_values
from ode_cpd.src.loggers import Loggers

logger = logging.getLogger(__name__)


def _get_bases_below_parent(cls: type, parent: type, bases=None) -> Set[type]:
    if bases is None:
        bases = set()

    if parent not in cls.__bases__:
        for base in cls.__bases__:
            bases.update(_get_bases_below_parent(base, parent, bases))
    else:
        # don't support multiple inheritance when
        # inherting directly from the parent
        assert len(cls.__bases__) == 1

        bases.add(cls)

    return bases


@dataclass
class DefaultConfig:
    """
    Template for any configuration file
    """

    def __post_init__(self):
        self._possible_values: Dict[str, Any] = {k: None for k in self.__dict__}

        # go up the class hierarchy until we are one below the `DefaultConfig`
        bases = _get_bases_below_parent(self.__class__, DefaultConfig)

        # there must be exactly one unique class up the class hierarchy
        # which inherits directly from the `DefaultConfig`
        assert len(bases) == 1
        base = next(iter(bases))

        self._order = [field.name for field in fields(base)]

    def _get_possible_values(self, field: str) -> Optional[possible_values.Value]:
        poss_values = self._possible_values.get(field, None)
        if isinstance(poss_values, (tuple, list)):
            poss_values = possible_values.from_sequence(poss_values)
        return poss_values

    def _get_order(self) -> List[str]:
        """
        Returns the order in which to write the keys of the config.
        Keys declared by subclasses but not by the first base come last.
        """

        keys = self.__dict__.keys()
        ordered_keys = [key for key in self._order if key in keys]
        unordered_keys = sorted(set(keys) - set(ordered_keys))
        return ordered_keys + unordered_keys

    @classmethod
    def get_annotations(cls):
        """Returns type annotations through all the Parent config classes"""

        d: Dict[str, Any] = {}
        for c in cls.mro()[::-1]:
            try:
                d.update(**c.__annotations__)
            except AttributeError:
                # object, at least, has no __annotations__ attribute.
                pass
        return d

    @classmethod
    def from_dict(cls, d: dict):
        """Creates a config object from a dictionary"""
        annotations = cls.get_annotations()
        d_filtered = {k: v for k, v in d.items() if k in annotations}
        if len(d) != len(d_filtered):
            logger.warning(
                f"Keys {set(d.keys()) - set(d_filtered.keys())} are not in the config."
            )
        for k, v in d_filtered.items():
            # yaml has no tuples
            if isinstance(v, list):
                d_filtered[k] = tuple(v)
        return cls(**d_filtered)  # mypy: ignore

    def check(self) -> Dict[str, List]:
        """Validates every field against its declared possible values."""

        errors: Dict[str, List] = {"title": [], "message": []}
        for k in self._get_order():
            if k.startswith("_"):
                continue
            poss_values = self._get_possible_values(k)
            if poss_values is None:
                continue
            value = getattr(self, k)
            if not poss_values.contains(value):
                errors["title"] += [f"Invalid value for {k}"]
                errors["message"] += [
                    f"{type(self).__name__}.{k} = {value!r} must be "
                    f"{poss_values.describe()}."
                ]
        return errors


@dataclass
class DefaultConfigProblemBase(DefaultConfig):
    """
    Base class for all problem configs.
    Defines the interface for all problem configs.
    """

    experiment_name: str
    output_directory: str

    system: Any
    data: Any
    gp: Any
    detector: Any
    uq: Any
    benchmark: Any
    environment: Any
    logging: Any

    @property
    def problem_type(self) -> str:
        """
        Parse problem_type from config filename,
        for example: lotka_volterra_config.py -> lotka_volterra
        """
        return type(self).__dict__["__module__"].split(".")[-1].replace("_config", "")

    @classmethod
    def from_dict(cls, cfg_dict: dict):
        class_fields = {f.name: f for f in dataclasses.fields(cls)}

        # Prepare arguments for creating a new dataclass instance
        init_args = {}
        for field_name, field_obj in class_fields.items():
            if hasattr(field_obj.type, "from_dict"):
                attr_value = cfg_dict.get(field_name, {})
                init_args[field_name] = field_obj.type.from_dict(attr_value)
            elif field_name in cfg_dict:
                init_args[field_name] = cfg_dict[field_name]

        return cls(**init_args)

    def sub_configs(self) -> Dict[str, DefaultConfig]:
        return {
            k: v
            for k, v in self.__dict__.items()
            if not k.startswith("_") and isinstance(v, DefaultConfig)
        }

    def check(self) -> Dict[str, List]:
        """
        Checks for errors (incompatible settings) for the specific problem type.
        Returns:
        A dictionary with two keys:
        - "title": A list of error titles.
        - "message": A list of error messages.
        """
        errors: Dict[str, List] = {"title": [], "message": []}
        for sub_cfg in self.sub_configs().values():
            sub_errors = sub_cfg.check()
            errors["title"].extend(sub_errors["title"])
            errors["message"].extend(sub_errors["message"])
        return errors

    def apply_paper_scale(self) -> None:
        """Switches desk-scale defaults to the full experimental settings."""
        self.benchmark.replications = 100


@dataclass
class ConfigSystem(DefaultConfig):
    name: str = "seird"
    log_transform: bool = False

    theta: Tuple[float, ...] = ()
    psi: Tuple[float, ...] = ()
    x0: Tuple[float, ...] = ()
    x0_low: float = -50.0
    x0_high: float = 50.0
    population: float = 1001550.0

    theta_low: Tuple[float, ...] = ()
    theta_high: Tuple[float, ...] = ()

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["name"] = (
            "seird",
            "lotka_volterra",
            "lorenz",
            "exponential",
        )
        self._possible_values["population"] = (1.0, None, 1.0)


@dataclass
class ConfigData(DefaultConfig):
    n_observations: int = 150
    observation_spacing: float = 1.0
    noise_model: str = "multiplicative-lognormal"
    noise_level: float = 0.05
    rk_substeps: int = 10
    observed_components: Tuple[int, ...] = ()

    change_mode: str = "windows"
    change_parameters: Tuple[int, ...] = ()
    change_values: Tuple[float, ...] = ()
    change_window_low: Tuple[float, ...] = ()
    change_window_high: Tuple[float, ...] = ()
    change_rate: float = 0.08
    change_start: float = 0.0
    min_separation: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["n_observations"] = (2, None, 1)
        self._possible_values["observation_spacing"] = (1e-6, None, 0.01)
        self._possible_values["noise_model"] = (
            "multiplicative-lognormal",
            "additive-gaussian",
        )
        self._possible_values["noise_level"] = (0.0, None, 0.01)
        self._possible_values["rk_substeps"] = (1, 1000, 1)
        self._possible_values["observed_components"] = (0, None, 1)
        self._possible_values["change_mode"] = ("windows", "poisson", "none")
        self._possible_values["change_rate"] = (1e-12, None, 0.01)
        self._possible_values["change_start"] = (0.0, None, 1.0)
        self._possible_values["min_separation"] = (0.0, None, 1.0)

    @property
    def horizon(self) -> float:
        return (self.n_observations - 1) * self.observation_spacing


@dataclass
class ConfigGp(DefaultConfig):
    nu: float = 2.01
    n_midpoints: int = 1
    mean: str = "constant"
    n_starts: int = 8
    phi1_bounds: Tuple[float, ...] = (1e-2, 1e2)
    phi2_bounds: Tuple[float, ...] = (0.5, 200.0)
    sigma_floor: float = 1e-3
    jitter: Tuple[float, ...] = (1e-7, 1e-3)
    c_jitter: float = 1e-6

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["nu"] = (1.01, 10.0, 0.01)
        self._possible_values["n_midpoints"] = (0, 10, 1)
        self._possible_values["mean"] = ("constant", "zero")
        self._possible_values["n_starts"] = (1, 64, 1)
        self._possible_values["phi1_bounds"] = (1e-12, None, 0.01)
        self._possible_values["phi2_bounds"] = (1e-12, None, 0.01)
        self._possible_values["sigma_floor"] = (1e-12, None, 1e-3)
        self._possible_values["jitter"] = (0.0, 1.0, 1e-7)
        self._possible_values["c_jitter"] = (0.0, 1.0, 1e-7)


@dataclass
class ConfigDetector(DefaultConfig):
    backend: str = "omagic"
    window_size: int = 40
    min_window: int = 2
    detection_zone: int = 7
    threshold: float = 10.0
    min_change_separation: int = 0

    refresh_policy: str = "adaptive"
    trust_region: bool = True
    trust_region_fraction: float = 0.2
    fit_sigma: bool = True
    n_init_starts: int = 3
    maxiter: int = 500

    calibrate: bool = False
    calibration_series: int = 20
    calibration_steps: int = 20
    safety_multiplier: float = 1.0

    rk_substeps: int = 4
    rk_maxiter: int = 200

    number_of_workers: int = 1

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["backend"] = ("omagic", "runge-kutta")
        self._possible_values["window_size"] = (2, None, 1)
        self._possible_values["min_window"] = (1, None, 1)
        self._possible_values["detection_zone"] = (1, None, 1)
        self._possible_values["threshold"] = (1e-12, None, 1.0)
        self._possible_values["min_change_separation"] = (0, None, 1)
        self._possible_values["refresh_policy"] = (
            "adaptive",
            "full",
            "phi1-only",
            "off",
        )
        self._possible_values["trust_region_fraction"] = (1e-6, 1.0, 0.05)
        self._possible_values["n_init_starts"] = (1, 16, 1)
        self._possible_values["maxiter"] = (1, None, 1)
        self._possible_values["calibration_series"] = (1, None, 1)
        self._possible_values["calibration_steps"] = (1, None, 1)
        self._possible_values["safety_multiplier"] = (1e-6, None, 0.1)
        self._possible_values["rk_substeps"] = (1, 1000, 1)
        self._possible_values["rk_maxiter"] = (1, None, 1)
        self._possible_values["number_of_workers"] = (1, 256, 1)

    @property
    def change_separation(self) -> int:
        return self.min_change_separation or self.min_window


@dataclass
class ConfigUq(DefaultConfig):
    sigma0: Tuple[float, ...] = (0.01,)
    lambda0: float = 1.0
    theta_min: Tuple[float, ...] = (0.0,)
    theta_max: Tuple[float, ...] = (1.0,)

    n_samples: int = 1000
    burn_in: int = 500
    step_size: float = 0.05
    leapfrog_steps: int = 5
    target_acceptance: float = 0.7
    acceptance_band: Tuple[float, ...] = (0.6, 0.8)
    theta_scale: float = 0.01

    initial_indicator: str = "single"
    freeze_trajectory: bool = False
    n_midpoints: int = 0
    n_chains: int = 1

    # prior sensitivity, each setting changes one knob of the base prior
    sensitivity_sigma0_scales: Tuple[float, ...] = (0.5, 2.0)
    sensitivity_lambda0: Tuple[float, ...] = (0.5, 5.0)
    sensitivity_step_sizes: Tuple[float, ...] = ()
    sensitivity_leapfrog_steps: Tuple[int, ...] = ()
    sensitivity_initial_indicators: Tuple[str, ...] = ("all",)

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["sigma0"] = (1e-12, None, 0.001)
        self._possible_values["lambda0"] = (1e-12, None, 0.1)
        self._possible_values["n_samples"] = (1, None, 1)
        self._possible_values["burn_in"] = (0, None, 1)
        self._possible_values["step_size"] = (1e-12, None, 0.01)
        self._possible_values["leapfrog_steps"] = (1, None, 1)
        self._possible_values["target_acceptance"] = (0.0, 1.0, 0.05)
        self._possible_values["acceptance_band"] = (0.0, 1.0, 0.05)
        self._possible_values["theta_scale"] = (1e-12, None, 0.01)
        self._possible_values["initial_indicator"] = ("single", "all")
        self._possible_values["n_midpoints"] = (0, 10, 1)
        self._possible_values["n_chains"] = (1, 64, 1)
        self._possible_values["sensitivity_sigma0_scales"] = (1e-12, None, 0.1)
        self._possible_values["sensitivity_lambda0"] = (1e-12, None, 0.1)
        self._possible_values["sensitivity_step_sizes"] = (1e-12, None, 0.01)
        self._possible_values["sensitivity_leapfrog_steps"] = (1, None, 1)
        self._possible_values["sensitivity_initial_indicators"] = ("single", "all")


@dataclass
class ConfigBenchmark(DefaultConfig):
    replications: int = 10
    thresholds: Tuple[float, ...] = (10.0, 20.0, 30.0, 50.0)
    backends: Tuple[str, ...] = ("omagic", "runge-kutta")
    tolerance: int = 0
    number_of_workers: int = 1

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["replications"] = (1, None, 1)
        self._possible_values["thresholds"] = (1e-12, None, 1.0)
        self._possible_values["backends"] = ("omagic", "runge-kutta")
        self._possible_values["tolerance"] = (0, None, 1)
        self._possible_values["number_of_workers"] = (1, 256, 1)


@dataclass
class ConfigEnvironment(DefaultConfig):
    seed: int = 1

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["seed"] = (0, 2**32 - 1, 1)


@dataclass
class ConfigLogging(DefaultConfig):
    logger: str = "None"
    log_level: str = "INFO"

    def __post_init__(self):
        super().__post_init__()
        self._possible_values["logger"] = Loggers.names()
        self._possible_values["log_level"] = ("DEBUG", "INFO", "WARNING", "ERROR")

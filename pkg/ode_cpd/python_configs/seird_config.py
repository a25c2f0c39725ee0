import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from ode_cpd.python_configs.base import (
    ConfigBenchmark,
    ConfigData,
    ConfigDetector,
    ConfigEnvironment,
    ConfigGp,
    ConfigLogging,
    ConfigSystem,
    ConfigUq,
    DefaultConfigProblemBase,
)
from ode_cpd.src.utils.utils import generate_experiment_name


@dataclass
class ConfigSeirdSystem(ConfigSystem):
    name: str = "seird"
    log_transform: bool = True

    # (beta, p_d) before any change
    theta: Tuple[float, ...] = (0.8, 0.02)
    # (v_e, v_i)
    psi: Tuple[float, ...] = (0.1, 0.1)
    x0: Tuple[float, ...] = (1000000.0, 1000.0, 500.0, 50.0)
    population: float = 1001550.0

    theta_low: Tuple[float, ...] = (1e-3, 1e-4)
    theta_high: Tuple[float, ...] = (2.0, 0.5)


@dataclass
class ConfigSeirdData(ConfigData):
    n_observations: int = 150
    observation_spacing: float = 1.0
    noise_model: str = "multiplicative-lognormal"
    noise_level: float = 0.05

    # beta drops at t0 ~ U[50, 70], the death rate rises at t1 ~ U[90, 110]
    change_mode: str = "windows"
    change_parameters: Tuple[int, ...] = (0, 1)
    change_values: Tuple[float, ...] = (0.1, 0.05)
    change_window_low: Tuple[float, ...] = (50.0, 90.0)
    change_window_high: Tuple[float, ...] = (70.0, 110.0)


@dataclass
class ConfigSeirdDetector(ConfigDetector):
    window_size: int = 40
    detection_zone: int = 7
    threshold: float = 20.0
    # fixed h of the threshold sweep and of runs with calibrate off
    calibrate: bool = True
    min_change_separation: int = 10


@dataclass
class ConfigSeirdUq(ConfigUq):
    sigma0: Tuple[float, ...] = (0.01, 0.01)
    lambda0: float = 1.0
    theta_min: Tuple[float, ...] = (0.0, 0.0)
    theta_max: Tuple[float, ...] = (1.0, 1.0)


@dataclass
class ConfigProblemBase(DefaultConfigProblemBase):
    output_directory: str = f"output/{os.path.basename(__file__).split('.')[0]}"
    experiment_name: str = field(default_factory=generate_experiment_name)

    system: ConfigSeirdSystem = field(default_factory=ConfigSeirdSystem)
    data: ConfigSeirdData = field(default_factory=ConfigSeirdData)
    gp: ConfigGp = field(default_factory=ConfigGp)
    detector: ConfigSeirdDetector = field(default_factory=ConfigSeirdDetector)
    uq: ConfigSeirdUq = field(default_factory=ConfigSeirdUq)
    benchmark: ConfigBenchmark = field(default_factory=ConfigBenchmark)
    environment: ConfigEnvironment = field(default_factory=ConfigEnvironment)
    logging: ConfigLogging = field(default_factory=ConfigLogging)

    def check(self) -> Dict[str, List]:
        errors = super().check()
        if self.system.name == "seird" and len(self.system.x0) != 4:
            errors["title"] += ["Invalid initial state"]
            errors["message"] += [
                "The SEIRD initial state needs the four compartments (S, E, I, D)."
            ]
        return errors

import os
from dataclasses import dataclass, field
from typing import Tuple

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
class ConfigLotkaVolterraSystem(ConfigSystem):
    name: str = "lotka_volterra"
    log_transform: bool = True

    # predator death rate gamma, the switching parameter
    theta: Tuple[float, ...] = (0.6,)
    # (alpha, beta, delta)
    psi: Tuple[float, ...] = (0.6, 0.75, 1.0)
    # (preys, predators)
    x0: Tuple[float, ...] = (2.0, 1.0)

    theta_low: Tuple[float, ...] = (0.05,)
    theta_high: Tuple[float, ...] = (3.0,)


@dataclass
class ConfigLotkaVolterraData(ConfigData):
    n_observations: int = 200
    observation_spacing: float = 1.0
    noise_model: str = "multiplicative-lognormal"
    noise_level: float = 0.05

    change_mode: str = "poisson"
    change_parameters: Tuple[int, ...] = (0,)
    # visited in turn at successive changes
    change_values: Tuple[float, ...] = (1.0, 0.6)
    change_rate: float = 0.08
    change_start: float = 40.0
    min_separation: float = 15.0


@dataclass
class ConfigLotkaVolterraDetector(ConfigDetector):
    window_size: int = 40
    detection_zone: int = 7
    threshold: float = 20.0
    # fixed h of the threshold sweep and of runs with calibrate off
    calibrate: bool = True
    min_change_separation: int = 10


@dataclass
class ConfigLotkaVolterraUq(ConfigUq):
    sigma0: Tuple[float, ...] = (0.01,)
    lambda0: float = 5.0
    theta_min: Tuple[float, ...] = (0.0,)
    theta_max: Tuple[float, ...] = (1.0,)


@dataclass
class ConfigProblemBase(DefaultConfigProblemBase):
    output_directory: str = f"output/{os.path.basename(__file__).split('.')[0]}"
    experiment_name: str = field(default_factory=generate_experiment_name)

    system: ConfigLotkaVolterraSystem = field(
        default_factory=ConfigLotkaVolterraSystem
    )
    data: ConfigLotkaVolterraData = field(default_factory=ConfigLotkaVolterraData)
    gp: ConfigGp = field(default_factory=ConfigGp)
    detector: ConfigLotkaVolterraDetector = field(
        default_factory=ConfigLotkaVolterraDetector
    )
    uq: ConfigLotkaVolterraUq = field(default_factory=ConfigLotkaVolterraUq)
    benchmark: ConfigBenchmark = field(default_factory=ConfigBenchmark)
    environment: ConfigEnvironment = field(default_factory=ConfigEnvironment)
    logging: ConfigLogging = field(default_factory=ConfigLogging)

    def apply_paper_scale(self) -> None:
        super().apply_paper_scale()
        self.data.n_observations = 1000

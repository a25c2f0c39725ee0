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
class ConfigLorenzSystem(ConfigSystem):
    name: str = "lorenz"
    log_transform: bool = False

    # rho switches between the chaotic and the non-chaotic regime
    theta: Tuple[float, ...] = (28.0,)
    # (sigma, beta)
    psi: Tuple[float, ...] = (10.0, 2.667)
    # drawn from U[x0_low, x0_high]^3 when empty
    x0: Tuple[float, ...] = ()
    x0_low: float = -50.0
    x0_high: float = 50.0

    theta_low: Tuple[float, ...] = (1.0,)
    theta_high: Tuple[float, ...] = (50.0,)


@dataclass
class ConfigLorenzData(ConfigData):
    n_observations: int = 200
    observation_spacing: float = 0.05
    noise_model: str = "additive-gaussian"
    noise_level: float = 1.0
    rk_substeps: int = 20

    change_mode: str = "poisson"
    change_parameters: Tuple[int, ...] = (0,)
    change_values: Tuple[float, ...] = (18.0, 28.0)
    change_rate: float = 0.5
    change_start: float = 2.0
    min_separation: float = 1.5


@dataclass
class ConfigLorenzDetector(ConfigDetector):
    window_size: int = 40
    detection_zone: int = 7
    threshold: float = 20.0
    # fixed h of the threshold sweep and of runs with calibrate off
    calibrate: bool = True
    min_change_separation: int = 10


@dataclass
class ConfigLorenzUq(ConfigUq):
    sigma0: Tuple[float, ...] = (0.01,)
    lambda0: float = 5.0
    theta_min: Tuple[float, ...] = (10.0,)
    theta_max: Tuple[float, ...] = (30.0,)
    theta_scale: float = 0.005


@dataclass
class ConfigProblemBase(DefaultConfigProblemBase):
    output_directory: str = f"output/{os.path.basename(__file__).split('.')[0]}"
    experiment_name: str = field(default_factory=generate_experiment_name)

    system: ConfigLorenzSystem = field(default_factory=ConfigLorenzSystem)
    data: ConfigLorenzData = field(default_factory=ConfigLorenzData)
    gp: ConfigGp = field(default_factory=ConfigGp)
    detector: ConfigLorenzDetector = field(default_factory=ConfigLorenzDetector)
    uq: ConfigLorenzUq = field(default_factory=ConfigLorenzUq)
    benchmark: ConfigBenchmark = field(default_factory=ConfigBenchmark)
    environment: ConfigEnvironment = field(default_factory=ConfigEnvironment)
    logging: ConfigLogging = field(default_factory=ConfigLogging)

    def apply_paper_scale(self) -> None:
        super().apply_paper_scale()
        self.data.n_observations = 1000

import pytest

from ode_cpd.python_configs.base import (
    ConfigBenchmark,
    ConfigData,
    ConfigDetector,
    ConfigGp,
    ConfigSystem,
    ConfigUq,
)
from ode_cpd.python_configs.seird_config import ConfigProblemBase


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def build_exponential_cfg(output_directory: str) -> ConfigProblemBase:
    """Rate 0.1 switching to -0.1 between the observations at t=19 and t=20."""

    cfg = ConfigProblemBase(experiment_name="test", output_directory=output_directory)
    cfg.system = ConfigSystem(
        name="exponential",
        theta=(0.1,),
        x0=(1.0,),
        theta_low=(-1.0,),
        theta_high=(1.0,),
    )
    cfg.data = ConfigData(
        n_observations=40,
        noise_model="additive-gaussian",
        noise_level=0.05,
        change_parameters=(0,),
        change_values=(-0.1,),
        change_window_low=(19.5,),
        change_window_high=(19.5,),
    )
    cfg.gp = ConfigGp(n_starts=2)
    cfg.detector = ConfigDetector(
        backend="runge-kutta",
        window_size=15,
        detection_zone=5,
        threshold=20.0,
        min_change_separation=8,
        n_init_starts=2,
        maxiter=100,
    )
    cfg.uq = ConfigUq(
        sigma0=(0.01,),
        theta_min=(-1.0,),
        theta_max=(1.0,),
        n_samples=20,
        burn_in=10,
    )
    cfg.benchmark = ConfigBenchmark(
        replications=2, thresholds=(20.0,), backends=("runge-kutta",)
    )
    return cfg


@pytest.fixture
def exponential_cfg(tmp_path):
    return build_exponential_cfg(str(tmp_path / "output"))

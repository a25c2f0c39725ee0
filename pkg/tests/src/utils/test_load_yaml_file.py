import os

from ode_cpd.src.utils.config_utils import load_config_yaml


def test_load_config_yaml():
    test_directory = os.path.abspath(os.path.join(os.path.dirname(__file__), "../"))
    cfg_path = os.path.join(test_directory, "test_data/cfg.yaml")
    cfg = load_config_yaml(cfg_path)

    assert cfg.problem_type == "seird"
    assert cfg.experiment_name == "test"
    assert cfg.output_directory == "output/user/test/"

    assert cfg.benchmark.backends == ("omagic",)
    assert cfg.benchmark.replications == 3
    assert cfg.benchmark.thresholds == (10.0, 20.0)

    assert cfg.data.change_mode == "windows"
    assert cfg.data.change_parameters == (0, 1)
    assert cfg.data.change_values == (0.1, 0.05)
    assert cfg.data.change_window_low == (50.0, 90.0)
    assert cfg.data.n_observations == 120
    assert cfg.data.noise_model == "multiplicative-lognormal"
    assert not hasattr(cfg.data, "config_item_that_is_not_used")

    assert cfg.detector.backend == "omagic"
    assert cfg.detector.refresh_policy == "phi1-only"
    assert cfg.detector.threshold == 25.0
    assert cfg.detector.trust_region is False
    assert cfg.detector.window_size == 30

    assert cfg.environment.seed == 7

    assert cfg.gp.n_midpoints == 1
    assert cfg.gp.nu == 2.01

    assert cfg.logging.log_level == "DEBUG"
    assert cfg.logging.logger == "None"

    assert cfg.system.log_transform is True
    assert cfg.system.name == "seird"
    assert cfg.system.theta == (0.8, 0.02)

    assert cfg.uq.lambda0 == 2.0
    assert cfg.uq.n_samples == 500
    assert cfg.uq.sigma0 == (0.01, 0.02)

    # not in the file, preset defaults
    assert cfg.system.x0 == (1000000.0, 1000.0, 500.0, 50.0)
    assert cfg.uq.theta_max == (1.0, 1.0)

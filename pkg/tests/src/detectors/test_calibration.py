import numpy as np
import pytest

from ode_cpd.src.detectors.calibration import calibrate_threshold
from ode_cpd.src.detectors.glr_detector import initialize, run_detector
from ode_cpd.src.observations import simulate_experiment


def without_changes(cfg):
    cfg.data.change_parameters = ()
    cfg.data.change_values = ()
    cfg.data.change_window_low = ()
    cfg.data.change_window_high = ()
    return cfg


def test_more_null_series_never_lower_the_threshold(exponential_cfg):
    cfg = without_changes(exponential_cfg)
    cfg.detector.calibration_steps = 3
    experiment = simulate_experiment(cfg, seed=2)
    state = initialize(experiment.observations.slice(0, 15), cfg)

    thresholds = []
    for n_series in (2, 3):
        cfg.detector.calibration_series = n_series
        thresholds.append(calibrate_threshold(state, state.system, cfg, seed=4))

    assert thresholds[1] >= thresholds[0] > 0


@pytest.mark.slow
def test_held_out_null_series_stay_below_calibrated_threshold(exponential_cfg):
    cfg = without_changes(exponential_cfg)
    cfg.detector.calibration_series = 20
    cfg.detector.calibration_steps = 20
    cfg.detector.safety_multiplier = 1.5
    cfg.data.n_observations = cfg.detector.window_size + 20

    calibration = run_detector(
        simulate_experiment(cfg, seed=100).observations, cfg, calibrate=True, seed=0
    )
    h = calibration.threshold

    quiet = []
    for seed in range(1, 21):
        experiment = simulate_experiment(cfg, seed=seed)
        assert len(experiment.change_times) == 0
        run = run_detector(experiment.observations, cfg, threshold=h, calibrate=False)
        quiet.append(len(run.change_points) == 0)

    assert np.isfinite(h) and h > 0
    assert np.mean(quiet) >= 0.95

import io
from types import SimpleNamespace
from unittest.mock import MagicMock

import numpy as np
import pytest

from ode_cpd.python_configs.base import ConfigDetector
from ode_cpd.src.detectors.glr_detector import (
    Backends,
    DetectorState,
    GlrDecision,
    refresh_kernel,
    rk_glr_step,
    run_detector,
    step,
    stream_detector,
    update_window,
)
from ode_cpd.src.detectors.magi_backend import MagiBackend
from ode_cpd.src.detectors.runge_kutta_backend import RungeKuttaBackend
from ode_cpd.src.detectors.window_fit import WindowFit
from ode_cpd.src.observations import (
    ObservationSet,
    read_observation_stream,
    simulate_experiment,
)
from ode_cpd.src.pipelines import detection_records
from ode_cpd.src.systems import ExponentialGrowth
from ode_cpd.src.utils.exceptions import ContractViolationError


def window_fit(window, change_index, value):
    n_segments = 1 if change_index is None else 2
    return WindowFit(
        value=value,
        theta=np.array([[0.1], [0.2]])[:n_segments],
        psi=np.zeros(0),
        sigma=np.ones(1),
        times=window.times.copy(),
        trajectory=np.zeros((len(window), 1)),
        change_index=change_index,
    )


def fake_state(values, n_prefix=10, **detector):
    """Detector state whose fits score `values[change_index]`, 0 by default.

    Change indices are window-relative, None under the no-change hypothesis.
    """

    options = dict(
        window_size=20, detection_zone=3, threshold=10.0, refresh_policy="off"
    )
    options.update(detector)
    cfg = SimpleNamespace(detector=ConfigDetector(**options))
    backend = MagicMock()
    backend.fit.side_effect = lambda window, k, warm: window_fit(
        window, k, values.get(k, 0.0)
    )
    times = np.arange(float(n_prefix))
    obs = ObservationSet(times, np.ones((n_prefix, 1)), ("x",))
    return DetectorState(
        cfg=cfg,
        system=ExponentialGrowth(),
        backend=backend,
        observations=obs,
        incumbent=window_fit(obs, None, 0.0),
        threshold=cfg.detector.threshold,
    )


def test_detection_reports_last_pre_change_observation():
    state = fake_state({9: 25.0, 8: 5.0})

    decision = step(state, (10.0, [1.0]))

    calls = state.backend.fit.call_args_list
    tested = sorted(c.args[1] for c in calls if c.args[1] is not None)
    assert tested == [8, 9, 10]
    assert decision.detected
    assert decision.log_lambda == pytest.approx(25.0)
    assert decision.k_star == 8
    assert decision.change_time == 9.0
    assert state.change_points[0].change_index == 9
    assert state.n_tests == 1
    np.testing.assert_array_equal(state.incumbent.theta, [[0.2]])


def test_window_restarts_after_detection():
    state = fake_state({9: 25.0}, min_change_separation=5)
    decision = step(state, (10.0, [1.0]))
    update_window(state, decision)

    assert state.lo == 9
    assert state.last_change_index == 9
    assert state.full_refresh_pending

    skipped = step(state, (11.0, [1.0]))

    assert skipped.skipped
    assert not skipped.detected
    assert skipped.log_lambda == 0.0
    assert state.n_tests == 1


def test_ties_go_to_the_earliest_break():
    state = fake_state({8: 12.0, 9: 12.0})

    decision = step(state, (10.0, [1.0]))

    assert decision.k_star == 7


def test_log_lambda_is_never_negative():
    state = fake_state({None: 3.0, 8: -5.0, 9: -5.0, 10: -5.0})

    decision = step(state, (10.0, [1.0]))

    assert decision.log_lambda == 0.0
    assert decision.l0 == 3.0
    assert not decision.detected
    assert state.trace[-1]["log_lambda"] == 0.0


def test_no_detection_below_threshold():
    state = fake_state({9: 9.0})

    decision = step(state, (10.0, [1.0]))

    assert not decision.detected
    assert decision.k_star is None
    assert state.change_points == []


def test_window_slides_at_capacity():
    state = fake_state({}, n_prefix=5, window_size=5, detection_zone=2)
    decision = step(state, (5.0, [1.0]))
    update_window(state, decision)

    assert state.lo == 2
    assert state.window_size == 4


def test_observations_must_arrive_in_order():
    state = fake_state({})

    with pytest.raises(ContractViolationError):
        step(state, (9.0, [1.0]))


def test_rk_step_needs_runge_kutta_backend():
    state = fake_state({})

    with pytest.raises(ContractViolationError):
        rk_glr_step(state, (10.0, [1.0]))


def test_adaptive_refresh_is_full_once_after_detection():
    state = fake_state({})
    state.full_refresh_pending = True

    refresh_kernel(state, "adaptive")
    refresh_kernel(state, "adaptive")

    fulls = [call.args[2] for call in state.backend.refresh.call_args_list]
    assert fulls == [True, False]
    assert not refresh_kernel(state, "off")
    with pytest.raises(ContractViolationError):
        refresh_kernel(state, "sometimes")


def test_decision_defaults():
    decision = GlrDecision(0.0, False, 1.0, 1, 10.0)

    assert not decision.skipped
    assert decision.l1 == {}


def test_backends_factory():
    assert Backends.names() == ["omagic", "runge-kutta"]
    assert Backends.get("omagic") is MagiBackend
    assert Backends.get("runge-kutta") is RungeKuttaBackend
    with pytest.raises(NotImplementedError):
        Backends.get("kalman")


def simulated(cfg):
    return simulate_experiment(cfg, seed=1)


def test_runge_kutta_detector_finds_rate_change(exponential_cfg):
    experiment = simulated(exponential_cfg)
    assert experiment.truth_indices().tolist() == [20]

    run = run_detector(experiment.observations, exponential_cfg)

    records = detection_records(run)
    assert len(records) >= 1
    assert all(r.detection_index >= 20 for r in records)
    assert abs(records[0].estimated_index - 20) <= 2
    assert run.n_tests > 0
    assert len(run.decisions) == 25


@pytest.mark.slow
def test_magi_detector_finds_rate_change(exponential_cfg):
    exponential_cfg.detector.backend = "omagic"
    experiment = simulated(exponential_cfg)

    run = run_detector(experiment.observations, exponential_cfg)

    records = detection_records(run)
    assert len(records) >= 1
    assert abs(records[0].estimated_index - 20) <= 3


def as_csv(obs):
    return io.StringIO(obs.to_frame().to_csv(index=False))


def test_replay_is_deterministic(exponential_cfg):
    obs = simulated(exponential_cfg).observations

    first = run_detector(obs, exponential_cfg, n_steps=12)
    second = run_detector(obs, exponential_cfg, n_steps=12)

    assert [d.log_lambda for d in first.decisions] == [
        d.log_lambda for d in second.decisions
    ]
    assert detection_records(first) == detection_records(second)


def test_stream_matches_replay(exponential_cfg):
    obs = simulated(exponential_cfg).observations

    replay = run_detector(obs, exponential_cfg)
    streamed = stream_detector(
        read_observation_stream(as_csv(obs)), exponential_cfg
    )

    np.testing.assert_allclose(
        [d.log_lambda for d in streamed.decisions],
        [d.log_lambda for d in replay.decisions],
        rtol=1e-6,
        atol=1e-8,
    )
    assert detection_records(streamed) == detection_records(replay)


def test_stream_must_fill_the_window(exponential_cfg):
    obs = simulated(exponential_cfg).observations.slice(0, 5)

    with pytest.raises(ContractViolationError):
        stream_detector(read_observation_stream(as_csv(obs)), exponential_cfg)


def test_higher_threshold_never_adds_detections(exponential_cfg):
    obs = simulated(exponential_cfg).observations
    runs = [
        detection_records(run_detector(obs, exponential_cfg, threshold=h))
        for h in (10.0, 20.0, 40.0)
    ]

    counts = [len(records) for records in runs]
    assert counts == sorted(counts, reverse=True)
    zone = exponential_cfg.detector.detection_zone
    for lower, higher in zip(runs, runs[1:]):
        for record in higher:
            assert any(
                abs(record.estimated_index - other.estimated_index) <= zone
                for other in lower
            )


def magi_state(cfg, window):
    backend = MagiBackend(cfg, ExponentialGrowth())
    backend.fit_kernels(window)
    incumbent = window_fit(window, None, 0.0)
    incumbent.sigma = np.full(1, cfg.data.noise_level)
    return DetectorState(
        cfg=cfg,
        system=ExponentialGrowth(),
        backend=backend,
        observations=window,
        incumbent=incumbent,
        threshold=cfg.detector.threshold,
    )


def test_phi1_only_refresh_keeps_phi2(exponential_cfg):
    window = simulated(exponential_cfg).observations.slice(0, 15)
    state = magi_state(exponential_cfg, window)
    before = state.backend.hyperparameters()

    state.observations = window.map_values(lambda v: 3.0 * v)
    assert refresh_kernel(state, "phi1-only")

    after = state.backend.hyperparameters()
    assert after["phi2"] == before["phi2"]
    assert after["phi1"][0] > before["phi1"][0]


def test_full_refresh_follows_the_data_scale(exponential_cfg):
    window = simulated(exponential_cfg).observations.slice(0, 15)
    state = magi_state(exponential_cfg, window)
    before = state.backend.hyperparameters()

    state.observations = window.map_values(lambda v: 3.0 * v)
    assert refresh_kernel(state, "full")

    assert state.backend.hyperparameters()["phi1"][0] > before["phi1"][0]

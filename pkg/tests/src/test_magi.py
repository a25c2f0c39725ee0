import numpy as np
import pytest
from scipy import stats

from ode_cpd.src.gp import GpKernelConfig, MeanFunction, fit_hyperparameters
from ode_cpd.src.integrators import integrate_rk4
from ode_cpd.src.magi import (
    DiscretizationGrid,
    MagiState,
    build_kernels,
    grad_log_surrogate,
    initial_trajectory,
    log_surrogate,
    maximize,
    surrogate_terms,
)
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import ExponentialGrowth, LotkaVolterra, StepFunction
from ode_cpd.src.utils.exceptions import ContractViolationError, LikelihoodError


@pytest.fixture
def exponential_toy():
    times = np.linspace(0.0, 2.0, 5)
    rng = np.random.default_rng(2)
    obs = ObservationSet(times, np.exp(0.5 * times) + rng.normal(0, 0.05, 5), ("x",))
    grid = DiscretizationGrid.from_observations(times, 0)
    config = GpKernelConfig(1.0, 1.0, mean=MeanFunction("constant", 1.5))
    kernels = build_kernels([config], grid)
    return obs, grid, kernels


@pytest.fixture
def lotka_volterra_toy():
    times = np.linspace(0.0, 6.0, 13)
    truth = integrate_rk4(
        LotkaVolterra(),
        [2.0, 1.0],
        StepFunction([3.0], [[0.6], [1.0]]),
        [0.6, 0.75, 1.0],
        times,
    )
    values = truth * np.exp(np.random.default_rng(0).normal(0, 0.05, truth.shape))
    values[4, 1] = np.nan
    obs = ObservationSet(times, values, ("prey", "predator"))
    grid = DiscretizationGrid.from_observations(times, 1)
    configs = [
        GpKernelConfig(1.0, 2.0, mean=MeanFunction("constant", float(np.mean(v))))
        for v in (obs.component_values(0), obs.component_values(1))
    ]
    kernels = build_kernels(configs, grid)
    x = initial_trajectory(obs, grid, kernels) * 1.05
    state = MagiState(x, [[0.7], [0.9]], [0.6, 0.7, 1.1], [0.1, 0.2], [12])
    return obs, grid, kernels, state


def test_grid_with_midpoints():
    grid = DiscretizationGrid.from_observations([0.0, 1.0, 3.0], 1)

    np.testing.assert_allclose(grid.times, [0.0, 0.5, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(grid.obs_index, [0, 2, 4])
    with pytest.raises(ContractViolationError):
        DiscretizationGrid.from_observations([1.0], 1)


def test_terms_match_dense_gaussian_densities(exponential_toy):
    obs, grid, kernels = exponential_toy
    km = kernels[0]
    x = np.exp(0.45 * grid.times)[:, None]
    state = MagiState(x, [[0.5]], [], [0.1])

    terms = surrogate_terms(state, obs, kernels, ExponentialGrowth(), grid)

    prior = stats.multivariate_normal.logpdf(
        x[:, 0], km.mu, km.K + km.jitter * np.eye(5)
    )
    noise = np.sum(stats.norm.logpdf(obs.values[:, 0], x[:, 0], 0.1))
    residual = 0.5 * x[:, 0] - km.dmu - km.m @ (x[:, 0] - km.mu)
    manifold = stats.multivariate_normal.logpdf(
        residual, np.zeros(5), km.C + km.c_jitter * np.eye(5)
    )
    np.testing.assert_allclose(terms[0], [prior, noise, manifold], rtol=1e-8)
    assert log_surrogate(
        state, obs, kernels, ExponentialGrowth(), grid
    ) == pytest.approx(prior + noise + manifold, rel=1e-10)


def test_gradient_matches_finite_differences(lotka_volterra_toy):
    obs, grid, kernels, state = lotka_volterra_toy
    system = LotkaVolterra()
    vector = state.to_vector()

    analytic = grad_log_surrogate(state, obs, kernels, system, grid)

    numeric = np.zeros_like(vector)
    for k in range(len(vector)):
        step = 1e-6 * max(1.0, abs(vector[k]))
        plus, minus = vector.copy(), vector.copy()
        plus[k] += step
        minus[k] -= step
        numeric[k] = (
            log_surrogate(state.from_vector(plus), obs, kernels, system, grid)
            - log_surrogate(state.from_vector(minus), obs, kernels, system, grid)
        ) / (2 * step)

    scale = np.abs(analytic).max()
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-5 * scale)


def test_noise_gradient_at_residual_free_point(exponential_toy):
    obs, grid, kernels = exponential_toy
    state = MagiState(obs.values.copy(), [[0.5]], [], [0.3])

    grad = grad_log_surrogate(state, obs, kernels, ExponentialGrowth(), grid)

    assert grad[-1] == pytest.approx(-5.0)


def test_noise_term_improves_towards_observations(exponential_toy):
    obs, grid, kernels = exponential_toy
    near = MagiState(obs.values.copy(), [[0.5]], [], [0.1])
    far = MagiState(obs.values + 0.2, [[0.5]], [], [0.1])

    near_terms = surrogate_terms(near, obs, kernels, ExponentialGrowth(), grid)
    far_terms = surrogate_terms(far, obs, kernels, ExponentialGrowth(), grid)

    assert near_terms[0, 1] > far_terms[0, 1]


def test_state_vector_layout(lotka_volterra_toy):
    _, _, _, state = lotka_volterra_toy
    vector = state.to_vector()

    np.testing.assert_array_equal(vector[: state.x.shape[0]], state.x[:, 0])
    np.testing.assert_allclose(vector[-2:], np.log([0.1, 0.2]))
    restored = state.from_vector(vector)
    np.testing.assert_allclose(restored.theta, state.theta)
    np.testing.assert_array_equal(restored.boundaries, [12])


def test_parameters_on_grid(lotka_volterra_toy):
    _, grid, _, state = lotka_volterra_toy
    theta_grid = state.theta_on_grid()

    assert theta_grid.shape == (grid.n, 1)
    assert theta_grid[11, 0] == 0.7
    assert theta_grid[12, 0] == 0.9


def test_non_finite_term_is_named(exponential_toy):
    obs, grid, kernels = exponential_toy
    x = obs.values.copy()
    x[2, 0] = np.nan
    state = MagiState(x, [[0.5]], [], [0.1])

    with pytest.raises(LikelihoodError) as exc:
        surrogate_terms(state, obs, kernels, ExponentialGrowth(), grid)
    assert exc.value.term == "gp_prior"
    assert exc.value.component == 0


def test_dimension_mismatch(exponential_toy):
    obs, grid, kernels = exponential_toy
    state = MagiState(np.ones((4, 1)), [[0.5]], [], [0.1])

    with pytest.raises(ContractViolationError):
        log_surrogate(state, obs, kernels, ExponentialGrowth(), grid)


def test_invalid_state():
    with pytest.raises(ContractViolationError):
        MagiState(np.ones((5, 1)), [[0.5], [0.6]], [], [0.1], [])
    with pytest.raises(ContractViolationError):
        MagiState(np.ones((5, 1)), [[0.5]], [], [0.0])


def test_two_segments_never_fit_worse(exponential_toy):
    obs, grid, kernels = exponential_toy
    system = ExponentialGrowth()

    null = maximize(obs, grid, kernels, system)
    alternative = maximize(obs, grid, kernels, system, [2], warm_start=null.state)

    assert np.isfinite(null.value)
    assert alternative.state.n_segments == 2
    assert alternative.value >= null.value - 1e-6


def test_maximize_keeps_fixed_noise(exponential_toy):
    obs, grid, kernels = exponential_toy
    warm = MagiState(obs.values.copy(), [[0.3]], [], [0.05])

    result = maximize(
        obs, grid, kernels, ExponentialGrowth(), warm_start=warm, fit_sigma=False
    )

    assert result.state.sigma[0] == pytest.approx(0.05)


@pytest.mark.slow
def test_maximize_recovers_lotka_volterra_parameter():
    times = np.linspace(0.0, 20.0, 41)
    psi = [0.6, 0.75, 1.0]
    truth = integrate_rk4(
        LotkaVolterra(), [2.0, 1.0], StepFunction.constant([0.6]), psi, times
    )
    obs = ObservationSet(times, truth, ("prey", "predator"))
    grid = DiscretizationGrid.from_observations(times, 1)
    configs = []
    for d in range(2):
        fit = fit_hyperparameters(obs.component_values(d), times)
        configs.append(fit.kernel_config())
    kernels = build_kernels(configs, grid)
    warm = MagiState(initial_trajectory(obs, grid, kernels), [[1.0]], psi, [0.01, 0.01])

    result = maximize(
        obs, grid, kernels, LotkaVolterra(), warm_start=warm, fit_psi=False
    )

    assert result.state.theta[0, 0] == pytest.approx(0.6, abs=0.05)


def fit_exponential_rate(times, values, n_midpoints):
    obs = ObservationSet(times, values[:, None], ("x",))
    config = fit_hyperparameters(obs.component_values(0), times).kernel_config()
    grid = DiscretizationGrid.from_observations(times, n_midpoints)
    kernels = build_kernels([config], grid)
    warm = MagiState(initial_trajectory(obs, grid, kernels), [[0.1]], [], [0.01])
    return maximize(obs, grid, kernels, ExponentialGrowth(), warm_start=warm)


def test_grid_refinement_keeps_the_estimate():
    times = np.linspace(0.0, 4.0, 11)
    values = np.exp(0.5 * times)

    coarse = fit_exponential_rate(times, values, 0)
    fine = fit_exponential_rate(times, values, 1)

    assert coarse.state.x.shape[0] == 11
    assert fine.state.x.shape[0] == 21
    assert fine.state.theta[0, 0] == pytest.approx(0.5, abs=0.1)
    assert fine.state.theta[0, 0] == pytest.approx(coarse.state.theta[0, 0], abs=0.1)


@pytest.mark.slow
def test_maximize_recovers_parameter_of_unobserved_component():
    times = np.linspace(0.0, 20.0, 41)
    psi = [0.6, 0.75, 1.0]
    truth = integrate_rk4(
        LotkaVolterra(), [2.0, 1.0], StepFunction.constant([0.6]), psi, times
    )
    obs = ObservationSet(times, truth, ("prey", "predator")).with_observed_components(
        [0]
    )
    assert obs.n_observed(1) == 0

    grid = DiscretizationGrid.from_observations(times, 1)
    prey = fit_hyperparameters(obs.component_values(0), times).kernel_config()
    predator = GpKernelConfig(prey.phi1, prey.phi2, mean=MeanFunction("constant", 1.0))
    kernels = build_kernels([prey, predator], grid)
    warm = MagiState(initial_trajectory(obs, grid, kernels), [[1.0]], psi, [0.01, 1.0])

    result = maximize(
        obs,
        grid,
        kernels,
        LotkaVolterra(),
        warm_start=warm,
        fit_psi=False,
        maxiter=2000,
    )

    assert result.state.theta[0, 0] == pytest.approx(0.6, abs=0.1)
    recovered = result.state.x[grid.obs_index, 1]
    assert np.corrcoef(recovered, truth[:, 1])[0, 1] > 0.9

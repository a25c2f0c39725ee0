import itertools

import numpy as np
import pytest
from scipy import stats

from ode_cpd.src.gp import GpKernelConfig, MeanFunction
from ode_cpd.src.magi import (
    DiscretizationGrid,
    MagiState,
    build_kernels,
    log_surrogate,
)
from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.systems import ExponentialGrowth
from ode_cpd.src.uq import (
    HmcConfig,
    SampleStore,
    UqPrior,
    change_counts,
    change_probability,
    gibbs_sample,
    initial_indicator,
    log_posterior_uq,
    log_prior_A_theta,
    tune_hmc,
)
from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    MetricUndefinedError,
    SamplerInitializationError,
)

PRIOR = UqPrior(sigma0=(0.01,), lambda0=1.0, theta_min=(0.0,), theta_max=(1.0,))


def toy(n_points, rate=0.5, spacing=0.25):
    times = np.arange(n_points) * spacing
    x = np.exp(rate * times)[:, None]
    obs = ObservationSet(times, x.copy(), ("x",))
    grid = DiscretizationGrid.from_observations(times, 0)
    kernels = build_kernels(
        [GpKernelConfig(1.0, 1.0, mean=MeanFunction("constant", float(x.mean())))],
        grid,
    )
    return obs, grid, kernels, x


def test_prior_with_change_at_every_point():
    times = np.array([0.0, 0.5, 1.5, 2.0])
    theta = np.array([[0.2], [0.9], [0.4], [0.5]])
    prior = UqPrior((0.1,), 2.0, (0.0,), (2.0,))

    value = log_prior_A_theta(np.ones(4), theta, prior, times)

    expected = np.sum(np.log(1 - np.exp(-2.0 * np.diff(times)))) - 4 * np.log(2.0)
    assert value == pytest.approx(expected, rel=1e-12)


def test_prior_without_changes():
    times = np.linspace(0.0, 1.0, 5)
    theta = np.full((5, 1), 0.3)

    value = log_prior_A_theta(initial_indicator(5), theta, PRIOR, times)

    dt = np.diff(times)
    expected = np.sum(-1.0 * dt + stats.norm.logpdf(0.0, 0.0, 0.01 * np.sqrt(dt)))
    assert value == pytest.approx(expected - np.log(1.0), rel=1e-12)


def test_prior_term_by_term():
    rng = np.random.default_rng(4)
    times = np.array([0.0, 0.3, 0.5, 1.2])
    theta = rng.uniform(0.1, 0.9, size=(4, 2))
    prior = UqPrior((0.05, 0.2), 3.0, (0.0, -1.0), (1.0, 1.0))
    A = np.array([1, 0, 1, 0])

    expected = -2 * (np.log(1.0) + np.log(2.0))
    for i in range(1, 4):
        dt = times[i] - times[i - 1]
        if A[i]:
            expected += np.log(1 - np.exp(-3.0 * dt))
        else:
            expected += -3.0 * dt
            expected += np.sum(
                stats.norm.logpdf(
                    theta[i] - theta[i - 1], 0.0, np.array([0.05, 0.2]) * np.sqrt(dt)
                )
            )

    assert log_prior_A_theta(A, theta, prior, times) == pytest.approx(expected)


def test_prior_outside_slab_is_rejected():
    times = np.linspace(0.0, 1.0, 3)
    theta = np.array([[0.5], [0.5], [1.5]])

    assert log_prior_A_theta([1, 0, 1], theta, PRIOR, times) == -np.inf
    assert np.isfinite(log_prior_A_theta([1, 0, 0], theta, PRIOR, times))


def test_first_point_starts_a_segment():
    with pytest.raises(ContractViolationError):
        log_prior_A_theta([0, 0, 1], np.zeros((3, 1)), PRIOR, [0.0, 1.0, 2.0])
    with pytest.raises(ContractViolationError):
        log_prior_A_theta([1, 2, 0], np.zeros((3, 1)), PRIOR, [0.0, 1.0, 2.0])


def test_invalid_prior():
    with pytest.raises(ContractViolationError):
        UqPrior((0.0,), 1.0, (0.0,), (1.0,))
    with pytest.raises(ContractViolationError):
        UqPrior((0.1,), 1.0, (1.0,), (1.0,))


def test_posterior_is_prior_plus_surrogate():
    obs, grid, kernels, x = toy(6)
    theta = np.full((6, 1), 0.5)
    A = np.array([1, 0, 0, 1, 0, 0])
    system = ExponentialGrowth()

    value = log_posterior_uq(
        A, theta, x, obs, kernels, PRIOR, system, grid, [], [0.05]
    )

    prior = log_prior_A_theta(A, theta, PRIOR, grid)
    likelihood = log_surrogate(
        MagiState.per_point(x, theta, [], [0.05]), obs, kernels, system, grid
    )
    assert value == pytest.approx(prior + likelihood, rel=1e-12)


def test_flipping_back_restores_posterior():
    obs, grid, kernels, x = toy(6)
    theta = np.full((6, 1), 0.5)
    A = initial_indicator(6)
    args = (theta, x, obs, kernels, PRIOR, ExponentialGrowth(), grid, [], [0.05])

    before = log_posterior_uq(A, *args)
    flipped = A.copy()
    flipped[3] = 1
    changed = log_posterior_uq(flipped, *args)
    flipped[3] = 0

    assert changed != before
    assert log_posterior_uq(flipped, *args) == before


def test_posterior_improves_towards_observations():
    obs, grid, kernels, x = toy(6)
    theta = np.full((6, 1), 0.5)
    args = (obs, kernels, PRIOR, ExponentialGrowth(), grid, [], [0.05])
    A = initial_indicator(6)

    assert log_posterior_uq(A, theta, x, *args) > log_posterior_uq(
        A, theta, x + 0.1, *args
    )


def test_initial_indicator():
    np.testing.assert_array_equal(initial_indicator(4), [1, 0, 0, 0])
    np.testing.assert_array_equal(initial_indicator(3, "all"), [1, 1, 1])
    with pytest.raises(ContractViolationError):
        initial_indicator(3, "random")


def test_tune_hmc():
    hmc = HmcConfig(epsilon=0.1)

    assert hmc.initial_epsilon == 0.1
    assert tune_hmc(hmc, [1.0]).epsilon > 0.1
    assert tune_hmc(hmc, [0.7] * 5).epsilon == pytest.approx(0.1, rel=0.01)
    assert tune_hmc(hmc, []) is hmc

    tuned = tune_hmc(hmc, [0.0] * 10)
    assert tuned.epsilon <= 0.05
    assert tuned.initial_epsilon == 0.1
    assert tuned.leapfrog_steps == hmc.leapfrog_steps


def test_tune_hmc_depends_on_history_only():
    hmc = HmcConfig(epsilon=0.1)
    history = [0.2, 0.9, 0.5, 1.0]

    once = tune_hmc(hmc, history)
    twice = tune_hmc(tune_hmc(hmc, history[:2]), history)

    assert twice.epsilon == pytest.approx(once.epsilon)


def store_from(A, theta=None):
    A = np.asarray(A, dtype=np.int8)
    n_samples, n = A.shape
    theta = np.zeros((n_samples, n, 1)) if theta is None else theta
    return SampleStore(
        times=np.arange(float(n)),
        theta_names=("rate",),
        A=A,
        theta=theta,
        log_posterior=np.zeros(n_samples),
    )


def test_change_probability():
    store = store_from([[1, 0, 1, 0], [1, 1, 0, 0], [1, 0, 1, 0]])

    np.testing.assert_allclose(change_probability(store), [1.0, 1 / 3, 2 / 3, 0.0])
    sums, count = change_counts(store)
    np.testing.assert_array_equal(sums, [3, 1, 2, 0])
    assert count == 3


def test_change_probability_of_identical_samples():
    store = store_from([[1, 0, 1]] * 5)

    np.testing.assert_array_equal(change_probability(store), [1, 0, 1])


def test_change_probability_of_empty_store():
    with pytest.raises(MetricUndefinedError):
        change_probability(store_from(np.zeros((0, 3))))


def test_sample_frame_columns():
    theta = np.arange(6.0).reshape(2, 3, 1)
    df = store_from([[1, 0, 0], [1, 1, 0]], theta).to_frame()

    assert list(df.columns) == ["A_1", "A_2", "A_3", "rate_1", "rate_2", "rate_3"]
    assert df["rate_3"].tolist() == [2.0, 5.0]


def sample_toy(seed, **kwargs):
    obs, grid, kernels, x = toy(6)
    options = dict(
        obs=obs,
        grid=grid,
        kernels=kernels,
        prior=PRIOR,
        hmc=HmcConfig(epsilon=0.1, n_samples=30, burn_in=10),
        seed=seed,
        system=ExponentialGrowth(),
        psi=[],
        sigma=[0.05],
        x_init=x,
        theta_init=np.full((6, 1), 0.5),
    )
    options.update(kwargs)
    return gibbs_sample(**options)


def test_sampler_is_deterministic():
    first = sample_toy(3)
    second = sample_toy(3)

    assert len(first) == 30
    np.testing.assert_array_equal(first.A, second.A)
    np.testing.assert_array_equal(first.theta, second.theta)
    assert np.all(first.A[:, 0] == 1)
    assert first.x.shape == (30, 6, 1)


def test_frozen_trajectory_is_kept():
    obs, grid, kernels, x = toy(6)
    store = sample_toy(1, freeze_trajectory=True)

    for sample in store.x:
        np.testing.assert_array_equal(sample, x)


def test_sampler_without_trajectory_store():
    store = sample_toy(1, store_trajectory=False)

    assert store.x is None
    assert np.isnan(store.flip_acceptance[0])
    assert 0 <= store.hmc_acceptance <= 1


def test_prior_dominates_on_null_data():
    prior = UqPrior(sigma0=(1e-4,), lambda0=1e-3, theta_min=(0.0,), theta_max=(1.0,))
    store = sample_toy(
        2,
        prior=prior,
        freeze_trajectory=True,
        hmc=HmcConfig(epsilon=0.1, n_samples=200, burn_in=50),
    )

    assert np.all(change_probability(store)[1:] < 0.1)


def test_sampler_rejects_infinite_start():
    with pytest.raises(SamplerInitializationError) as exc:
        sample_toy(1, theta_init=np.full((6, 1), 2.0))
    assert exc.value.diagnostics["log_prior"] == -np.inf


def exact_indicator_posterior(obs, grid, kernels, prior, x, sigma):
    """Normalized posterior over A with theta integrated out.

    With x fixed the log posterior is quadratic in theta, so the Gaussian
    integral is exact up to slab truncation.
    """

    n = grid.n
    system = ExponentialGrowth()

    def f(A, theta):
        return log_posterior_uq(
            A, theta[:, None], x, obs, kernels, prior, system, grid, [], sigma
        )

    theta0 = np.full(n, 0.5)
    h = 1e-3
    eye = np.eye(n) * h
    configurations, log_mass = [], []
    for tail in itertools.product((0, 1), repeat=n - 1):
        A = np.array((1,) + tail)
        f0 = f(A, theta0)
        grad = np.array([(f(A, theta0 + e) - f(A, theta0 - e)) / (2 * h) for e in eye])
        hessian = np.array(
            [
                [
                    (
                        f(A, theta0 + a + b)
                        - f(A, theta0 + a - b)
                        - f(A, theta0 - a + b)
                        + f(A, theta0 - a - b)
                    )
                    / (4 * h**2)
                    for b in eye
                ]
                for a in eye
            ]
        )
        hessian = 0.5 * (hessian + hessian.T)
        peak = f0 - 0.5 * grad @ np.linalg.solve(hessian, grad)
        _, log_det = np.linalg.slogdet(-hessian)
        configurations.append(tuple(A))
        log_mass.append(peak + 0.5 * n * np.log(2 * np.pi) - 0.5 * log_det)
    log_mass = np.array(log_mass)
    mass = np.exp(log_mass - log_mass.max())
    return configurations, mass / mass.sum()


@pytest.mark.slow
def test_sampler_matches_enumerated_posterior():
    obs, grid, kernels, x = toy(8)
    prior = UqPrior(sigma0=(0.2,), lambda0=2.0, theta_min=(-1.0,), theta_max=(2.0,))
    configurations, exact = exact_indicator_posterior(
        obs, grid, kernels, prior, x, [0.05]
    )

    store = gibbs_sample(
        obs,
        grid,
        kernels,
        prior,
        HmcConfig(epsilon=0.2, n_samples=6000, burn_in=1000),
        seed=11,
        system=ExponentialGrowth(),
        psi=[],
        sigma=[0.05],
        x_init=x,
        theta_init=np.full((8, 1), 0.5),
        freeze_trajectory=True,
        store_trajectory=False,
    )

    index = {a: k for k, a in enumerate(configurations)}
    empirical = np.zeros(len(configurations))
    for sample in store.A:
        empirical[index[tuple(int(a) for a in sample)]] += 1
    empirical /= empirical.sum()

    assert 0.5 * np.abs(empirical - exact).sum() <= 0.1

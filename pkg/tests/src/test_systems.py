import numpy as np
import pytest

from ode_cpd.src.systems import (
    ExponentialGrowth,
    LogTransformedSystem,
    Lorenz,
    LotkaVolterra,
    Seird,
    StepFunction,
    Systems,
    eval_rhs,
    seird_recovered,
)
from ode_cpd.src.utils.exceptions import (
    ContractViolationError,
    NumericalDomainError,
    ObservationDomainError,
)

SEIRD_X0 = [1000000.0, 1000.0, 500.0, 50.0]


def test_seird_rhs():
    out = eval_rhs(Seird(1001550.0), SEIRD_X0, [0.8, 0.02], [0.1, 0.1])

    assert out[0] == pytest.approx(-0.8 * 500 * 1000000 / 1001550, rel=1e-12)
    assert out[0] == pytest.approx(-399.381, abs=1e-3)


def test_seird_without_infectious():
    out = eval_rhs(Seird(), [1000.0, 10.0, 0.0, 5.0], [0.8, 0.02], [0.1, 0.1])

    assert out[0] == 0.0
    assert out[3] == 0.0


def test_lorenz_rhs():
    out = eval_rhs(Lorenz(), [1.0, 1.0, 1.0], [28.0], [10.0, 2.667])

    np.testing.assert_allclose(out, [0.0, 26.0, -1.667], atol=1e-12)


def test_eval_rhs_checks_dimensions():
    with pytest.raises(ContractViolationError):
        eval_rhs(Lorenz(), [1.0, 1.0], [28.0], [10.0, 2.667])
    with pytest.raises(ContractViolationError):
        eval_rhs(Lorenz(), [1.0, 1.0, 1.0], [np.nan], [10.0, 2.667])


def test_eval_rhs_reports_non_finite_component():
    with pytest.raises(NumericalDomainError) as exc:
        eval_rhs(ExponentialGrowth(), [np.inf], [0.0], [])
    assert exc.value.component == 0


@pytest.mark.parametrize(
    "system, x, theta, psi",
    [
        (Seird(), SEIRD_X0, [0.8, 0.02], [0.1, 0.2]),
        (LotkaVolterra(), [2.0, 1.0], [0.6], [0.6, 0.75, 1.0]),
        (Lorenz(), [1.5, -2.0, 20.0], [28.0], [10.0, 2.667]),
        (ExponentialGrowth(), [3.0], [0.4], []),
        (LogTransformedSystem(LotkaVolterra()), [0.5, -0.2], [0.6], [0.6, 0.75, 1.0]),
        (LogTransformedSystem(Seird()), np.log(SEIRD_X0), [0.8, 0.02], [0.1, 0.2]),
    ],
)
def test_analytic_jacobians_match_finite_differences(system, x, theta, psi):
    x, theta, psi = (np.asarray(v, dtype=float) for v in (x, theta, psi))
    numeric = system.finite_difference_jacobians(x, theta, psi)
    analytic = (
        system.jacobian_x(x, theta, psi),
        system.jacobian_theta(x, theta, psi),
        system.jacobian_psi(x, theta, psi),
    )

    assert system.has_analytic_jacobians
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-6)


def test_jacobians_broadcast_over_points():
    system = LotkaVolterra()
    x = np.array([[2.0, 1.0], [1.0, 3.0], [0.5, 0.5]])
    theta = np.array([[0.6], [1.0], [0.6]])
    psi = np.array([0.6, 0.75, 1.0])

    jac = system.jacobian_x(x, theta, psi)

    assert jac.shape == (3, 2, 2)
    np.testing.assert_allclose(jac[1], system.jacobian_x(x[1], theta[1], psi))


def test_log_transform_rhs():
    base = LotkaVolterra()
    system = LogTransformedSystem(base)
    x = np.array([2.0, 1.0])
    theta, psi = np.array([0.6]), np.array([0.6, 0.75, 1.0])

    np.testing.assert_allclose(
        system.rhs(np.log(x), theta, psi), base.rhs(x, theta, psi) / x
    )
    np.testing.assert_allclose(system.inverse_transform(system.transform(x)), x)


def test_log_transform_needs_positive_values():
    with pytest.raises(ContractViolationError):
        LogTransformedSystem(Lorenz())
    with pytest.raises(ObservationDomainError):
        LogTransformedSystem(Seird()).transform([1.0, 0.0, 2.0, 3.0])


def test_step_function_is_right_continuous():
    path = StepFunction([1.0, 2.0], [[0.8], [0.1], [0.5]])

    assert path(0.99)[0] == 0.8
    assert path(1.0)[0] == 0.1
    assert path(2.5)[0] == 0.5
    assert path.n_segments == 3
    np.testing.assert_array_equal(path.breakpoints_between(0.0, 2.0), [1.0])


def test_step_function_validates_segments():
    with pytest.raises(ContractViolationError):
        StepFunction([2.0, 1.0], [[0.1], [0.2], [0.3]])
    with pytest.raises(ContractViolationError):
        StepFunction([1.0], [[0.1]])


def test_seird_recovered():
    trajectory = np.array([SEIRD_X0])

    assert seird_recovered(trajectory, 1001550.0)[0] == pytest.approx(0.0)


def test_invalid_bounds():
    with pytest.raises(ContractViolationError):
        LotkaVolterra(theta_bounds=[(1.0, 0.5)])


def test_systems_factory():
    assert Systems.names() == ["exponential", "lorenz", "lotka_volterra", "seird"]
    assert Systems.get("lorenz") is Lorenz
    assert Systems.get("unknown") is None
    assert Seird.dimensions() == {"states": 4, "theta": 2, "psi": 2}

import math

import numpy as np
import pytest
from pydantic import ValidationError

from modules.model import (
    Control,
    ControlGrid,
    PayoffFamily,
    State,
    TimeFunction,
    cobb_douglas,
    cost_growth_bound,
    cutoff_zeta,
    cutoff_zeta_derivative,
    derived_K,
    diffusion_matrix,
    drift_vector,
    frozen_payoff_model,
    hamiltonian,
    hamiltonian_batch,
    running_cost,
    terminal_boundary_value,
    truncation_cutoff,
    validate_conditions,
    vol_vector,
)
from modules.model import ModelParams, default_desk_model
from utils.errors import BoundOverflowError, ModelValidationError


def constant(value):
    return TimeFunction(kind="constant", coefficients=(value,))


def test_cobb_douglas_zero_effort_gives_zero_output():
    params = default_desk_model(A=1.0, alpha=0.5, beta=0.5)
    assert cobb_douglas(params, Control(0.0, 1.0)) == 0.0


def test_cobb_douglas_clamps_effort_to_box():
    params = default_desk_model(A=1.0, alpha=1.0, beta=1.0, N=1.0)
    assert cobb_douglas(params, Control(2.0, 1.0)) == pytest.approx(1.0)


def test_cobb_douglas_general_exponents():
    params = default_desk_model(A=2.0, alpha=0.5, beta=2.0)
    assert cobb_douglas(params, Control(0.5, 0.25)) == pytest.approx(0.25)


def test_cobb_douglas_zero_exponent_is_one():
    params = default_desk_model(alpha=0.0, beta=0.0)
    assert cobb_douglas(params, Control(0.0, 0.0)) == pytest.approx(params.A)


@pytest.mark.parametrize("theta,expected", [(0.0, 1.0), (6.0, 0.0), (-6.0, 0.0), (4.0, 1.0)])
def test_cutoff_zeta_plateau_and_support(theta, expected):
    params = default_desk_model(H=5.0)
    assert cutoff_zeta(params, theta) == pytest.approx(expected)


def test_cutoff_zeta_is_even_and_strictly_between_in_band():
    params = default_desk_model(H=5.0)
    value = cutoff_zeta(params, 4.5)
    assert 0.0 < value < 1.0
    assert cutoff_zeta(params, -4.5) == pytest.approx(value)


def test_cutoff_zeta_is_monotone_in_band():
    params = default_desk_model(H=5.0)
    values = cutoff_zeta(params, np.linspace(4.0, 5.0, 50))
    assert np.all(np.diff(values) <= 1e-15)


def test_cutoff_zeta_derivative_matches_finite_differences():
    params = default_desk_model(H=5.0)
    theta = np.concatenate([np.linspace(4.2, 4.8, 13), -np.linspace(4.2, 4.8, 13)])
    h = 1e-5
    numeric = (cutoff_zeta(params, theta + h) - cutoff_zeta(params, theta - h)) / (2 * h)
    assert cutoff_zeta_derivative(params, theta) == pytest.approx(numeric, rel=1e-6)
    assert cutoff_zeta_derivative(params, np.array([0.0, 3.5, 5.5])) == pytest.approx(np.zeros(3))


def test_cobb_douglas_is_monotone_in_each_control():
    params = default_desk_model(alpha=0.3, beta=0.7)
    levels = np.linspace(0.0, 1.0, 11)
    eta, c = np.meshgrid(levels, levels, indexing="ij")
    output = cobb_douglas(params, Control(eta, c))
    assert np.all(np.diff(output, axis=0) >= 0.0)
    assert np.all(np.diff(output, axis=1) >= 0.0)


def test_truncation_cutoff_is_one_inside_region():
    params = default_desk_model()
    inside = State(np.array([1.0, 2.0, 4.0]), np.array([0.25, 1.0, 4.0]), np.zeros(3))
    assert np.allclose(truncation_cutoff(params, 4.0, inside), 1.0)
    assert truncation_cutoff(params, 4.0, State(6.0, 1.0, 0.0)) == 0.0


def test_drift_vector_example():
    params = default_desk_model(
        H=5.0,
        payoff_drift=PayoffFamily(kind="time_linear", base=1.0),
        theta_drift=constant(1.0),
    )
    f = drift_vector(params, 0.5, State(2.0, 1.0, 0.0), Control(0.0, 0.0))
    assert f == pytest.approx(np.array([0.5, 0.0, 1.0]))


def test_vol_vector_density_component():
    params = default_desk_model(A=1.0, alpha=1.0, beta=1.0, varrho=2.0, ell=constant(0.5))
    assert vol_vector(params, 0.5, State(2.0, 0.0, 1.0), Control(1.0, 1.0))[1] == 0.0
    assert vol_vector(params, 0.5, State(2.0, 1.0, 1.0), Control(1.0, 1.0))[1] == pytest.approx(-0.75)


def test_vol_vector_is_linear_in_xi():
    params = default_desk_model()
    u = Control(0.5, 1.0)
    one = vol_vector(params, 0.3, State(2.0, 1.0, 0.5), u)
    three = vol_vector(params, 0.3, State(2.0, 3.0, 0.5), u)
    assert three[1] == pytest.approx(3.0 * one[1])
    assert (three[0], three[2]) == pytest.approx((one[0], one[2]))


def test_diffusion_matrix_rank_one_and_regularized():
    params = default_desk_model(
        payoff_vol=PayoffFamily(kind="autonomous", base=1.0),
        theta_vol=constant(0.0),
    )
    # xi = 0 kills the density row
    x = State(2.0, 0.0, 0.0)
    a = diffusion_matrix(params, 0.5, x, Control(0.0, 0.0))
    expected = np.zeros((3, 3))
    expected[0, 0] = 1.0
    assert np.allclose(a, expected)
    regularized = diffusion_matrix(params, 0.5, x, Control(0.0, 0.0), epsilon=0.1)
    assert np.min(np.linalg.eigvalsh(regularized)) >= 0.01 - 1e-12


def test_diffusion_matrix_rejects_negative_epsilon():
    with pytest.raises(ModelValidationError):
        diffusion_matrix(default_desk_model(), 0.5, State(2.0, 1.0, 0.0), Control(0.0, 0.0), epsilon=-0.1)


def test_running_cost_example():
    params = default_desk_model(k=1.0, gamma=2.0)
    assert running_cost(params, State(2.0, 2.0, 0.0), Control(0.5, 0.0)) == pytest.approx(0.5)


def test_terminal_boundary_value_example():
    assert terminal_boundary_value(State(2.0, 0.5, 0.0)) == pytest.approx(-1.0)


def test_hamiltonian_zero_jet_single_control():
    params = default_desk_model()
    grid = ControlGrid(eta_levels=(0.0,), c_levels=(0.0,))
    value, control = hamiltonian(params, grid, 0.5, State(2.0, 1.0, 0.0), np.zeros(3), np.zeros((3, 3)))
    assert value == 0.0
    assert control == Control(0.0, 0.0)


def test_hamiltonian_ties_go_to_lowest_index():
    params = frozen_payoff_model()
    grid = ControlGrid.uniform(params, 3, 3)
    # k = 0, zero jet: every control gives 0
    _, control = hamiltonian(params, grid, 0.5, State(2.0, 1.0, 0.0), np.zeros(3), np.zeros((3, 3)))
    assert control == Control(0.0, 0.0)


def test_hamiltonian_batch_matches_pointwise():
    params = default_desk_model()
    grid = ControlGrid.uniform(params, 3, 3)
    rng = np.random.default_rng(3)
    P = rng.uniform(1.0, 3.0, 6)
    xi = rng.uniform(0.5, 2.0, 6)
    theta = rng.uniform(-1.0, 1.0, 6)
    z = rng.normal(size=(3, 6))
    M = rng.normal(size=(3, 3, 6))
    M = 0.5 * (M + M.transpose(1, 0, 2))
    values, index = hamiltonian_batch(params, grid, 0.4, State(P, xi, theta), z, M)
    for i in range(6):
        v, u = hamiltonian(params, grid, 0.4, State(P[i], xi[i], theta[i]), z[:, i], M[:, :, i])
        assert values[i] == pytest.approx(v)
        assert grid.control(int(index[i])) == u


def test_hamiltonian_large_running_cost_selects_zero_effort():
    params = default_desk_model(k=1e6)
    grid = ControlGrid.uniform(params, 3, 3)
    _, control = hamiltonian(params, grid, 0.5, State(2.0, 1.0, 0.0), np.ones(3), np.zeros((3, 3)))
    assert control.eta == 0.0


def test_hamiltonian_never_decreases_under_grid_refinement():
    params = default_desk_model()
    coarse = ControlGrid.uniform(params, 3, 3)
    fine = ControlGrid.uniform(params, 5, 5)
    rng = np.random.default_rng(11)
    P = rng.uniform(1.0, 3.0, 40)
    xi = rng.uniform(0.5, 2.0, 40)
    theta = rng.uniform(-2.0, 2.0, 40)
    z = rng.normal(size=(3, 40))
    M = rng.normal(size=(3, 3, 40))
    M = 0.5 * (M + M.transpose(1, 0, 2))
    x = State(P, xi, theta)
    coarse_values, _ = hamiltonian_batch(params, coarse, 0.4, x, z, M)
    fine_values, _ = hamiltonian_batch(params, fine, 0.4, x, z, M)
    assert np.all(fine_values >= coarse_values - 1e-12 * np.maximum(1.0, np.abs(coarse_values)))


def test_control_grid_validation():
    with pytest.raises(ValidationError):
        ControlGrid(eta_levels=(), c_levels=(0.0,))
    with pytest.raises(ValidationError):
        ControlGrid(eta_levels=(0.0, 0.0), c_levels=(0.0,))
    grid = ControlGrid(eta_levels=(0.0, 0.5), c_levels=(0.0, 1.0))
    with pytest.raises(ModelValidationError):
        grid.check_endpoints(default_desk_model(N=1.0, C=1.0))


def test_control_grid_is_eta_major():
    grid = ControlGrid(eta_levels=(0.0, 1.0), c_levels=(0.0, 0.5, 1.0))
    assert grid.size == 6
    assert grid.control(1) == Control(0.0, 0.5)
    assert grid.control(3) == Control(1.0, 0.0)


@pytest.mark.parametrize("field,value", [("A", 0.0), ("varrho", -1.0), ("T", 0.0), ("H", 1.0),
                                          ("gamma", -0.5), ("R", math.inf)])
def test_model_params_rejects_invalid_scalars(field, value):
    with pytest.raises(ValidationError):
        ModelParams(**{field: value})


def test_time_function_families():
    assert TimeFunction(kind="linear", coefficients=(1.0, 2.0))(0.5) == pytest.approx(2.0)
    sine = TimeFunction(kind="sinusoidal", coefficients=(0.0, 1.0, math.pi, 0.0))
    assert sine(0.5) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        TimeFunction(kind="linear", coefficients=(1.0,))


def test_conditions_pass_for_zero_coefficients():
    params = frozen_payoff_model()
    report = validate_conditions(params, sample_budget=200, seed=1)
    assert report.passed
    for result in report.results.values():
        assert result.constant == pytest.approx(0.0)


def test_conditions_pass_for_default_desk_model():
    report = validate_conditions(default_desk_model(), sample_budget=500, seed=2)
    assert report.passed
    assert set(report.results) == {"C1", "C2", "C3", "C4"}


def test_condition_c4_flags_payoff_proportional_drift():
    params = default_desk_model(payoff_drift=PayoffFamily(kind="time_linear", payoff_slope=1.0))
    report = validate_conditions(params, sample_budget=500, seed=0)
    c4 = report.results["C4"]
    assert not c4.passed
    assert c4.witness is not None
    assert c4.witness["P"] > 10.0 * params.R
    assert report.results["C1"].passed
    assert report.results["C2"].passed


def test_condition_c4_flags_autonomous_drift():
    params = default_desk_model(payoff_drift=PayoffFamily(kind="autonomous", base=1.0))
    report = validate_conditions(params, sample_budget=500, seed=0)
    assert not report.results["C4"].passed
    assert report.results["C4"].witness["t"] < 0.5 * params.T


def test_conditions_reject_empty_budget():
    with pytest.raises(ModelValidationError):
        validate_conditions(default_desk_model(), sample_budget=0)


def test_derived_K_for_default_model():
    assert derived_K(default_desk_model()) == pytest.approx(2.06)


def test_bound_closed_form():
    params = ModelParams(A=1.0, alpha=1.0, beta=1.0, C=1.0, N=1.0, varrho=1.0, T=1.0, H=2.0,
                         k=1.0, gamma=1.0, ell=constant(0.0))
    bound = cost_growth_bound(params, State(1.0, 1.0, 0.0), derived_K=1.0)
    assert bound == pytest.approx(1.0 + 2.0 * math.e + math.exp(9.0))


def test_bound_is_zero_at_zero_density_and_linear_in_xi():
    params = default_desk_model()
    assert cost_growth_bound(params, State(2.0, 0.0, 0.0), derived_K(params)) == 0.0
    one = cost_growth_bound(params, State(2.0, 1.0, 0.0), derived_K(params))
    two = cost_growth_bound(params, State(2.0, 2.0, 0.0), derived_K(params))
    assert two == pytest.approx(2.0 * one)


def test_bound_overflow_is_reported():
    params = default_desk_model(H=50.0, varrho=0.01)
    with pytest.raises(BoundOverflowError):
        cost_growth_bound(params, State(2.0, 1.0, 0.0), derived_K(params))

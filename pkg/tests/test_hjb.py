import math

import numpy as np
import pytest

from modules.hjb import (
    GridSpec,
    HjbSolver,
    LadderReport,
    PolicyTable,
    ValueGrid,
    _balanced_factors,
    audit_value_bound,
    extract_policy,
    interpolate_value,
    solve_ladder,
    solve_regularized,
    synthesize_discrete_policy,
)
from modules.model import Control, State
from utils.errors import MissingArtifactError, ModelValidationError
from tests.helpers import make_grid, minus_p_xi


def _minus_p_xi_values(grid):
    t, P, xi, theta = np.meshgrid(*grid.axes, indexing="ij")
    return -P * xi


def test_frozen_model_solution_is_boundary_data(frozen_model, small_spec):
    grid = solve_regularized(frozen_model, small_spec)
    exact = _minus_p_xi_values(grid)
    assert grid.values.shape == small_spec.shape
    assert np.max(np.abs(grid.values - exact)) <= 1e-2 * np.max(np.abs(exact))
    assert np.max(np.abs(grid.values - exact)) < 1e-10


def test_terminal_slice_and_faces_hold_boundary_data(desk_model, small_spec):
    grid = solve_regularized(desk_model, small_spec)
    exact = _minus_p_xi_values(grid)
    assert np.array_equal(grid.values[-1], exact[-1])
    for face in (np.s_[:, 0], np.s_[:, -1], np.s_[:, :, 0], np.s_[:, :, -1],
                 np.s_[:, :, :, 0], np.s_[:, :, :, -1]):
        assert np.array_equal(grid.values[face], exact[face])


def test_desk_solution_diagnostics(desk_model, small_spec):
    grid = solve_regularized(desk_model, small_spec)
    assert np.all(np.isfinite(grid.values))
    assert grid.diagnostics["substeps"] >= small_spec.nT - 1
    assert grid.diagnostics["corner_nodes"] > 0


def test_single_step_with_costly_effort_keeps_boundary_data(still_model, control_grid):
    params = still_model.model_copy(update={"k": 1.0})
    spec = GridSpec(rho=3.0, nP=5, nXi=5, nTheta=5, nT=2, control_grid=control_grid)
    grid = solve_regularized(params, spec)
    assert grid.values[0] == pytest.approx(_minus_p_xi_values(grid)[0], abs=1e-12)


def test_value_is_monotone_in_running_cost_weight(desk_model, small_spec):
    cheap = solve_regularized(desk_model.model_copy(update={"k": 1.0}), small_spec)
    dear = solve_regularized(desk_model.model_copy(update={"k": 2.0}), small_spec)
    assert np.all(dear.values >= cheap.values - 1e-12)


def test_scheme_is_monotone_in_neighbour_values(desk_model, small_spec):
    solver = HjbSolver(desk_model, small_spec)
    stencil = solver.coefficients(0.5)
    dt = solver.stable_dt(stencil)
    rng = np.random.default_rng(0)
    V = solver.boundary_values + 0.1 * rng.normal(size=solver.boundary_values.shape)
    bumped = V.copy()
    bumped[2, 2, 2] += 0.5
    assert np.all(solver.step(bumped, stencil, dt) >= solver.step(V, stencil, dt) - 1e-12)


def test_grid_spec_requires_region_beyond_R(desk_model, control_grid):
    with pytest.raises(ModelValidationError):
        GridSpec(rho=1.0, control_grid=control_grid).validate_for(desk_model)


def test_interpolation_exact_on_bilinear_data(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    rng = np.random.default_rng(1)
    P = rng.uniform(1.0, 3.0, 20)
    xi = rng.uniform(1.0 / 3.0, 3.0, 20)
    values, outside = grid.interpolate(0.3, P, xi, 0.7)
    assert values == pytest.approx(-P * xi, abs=1e-12)
    assert not outside.any()


def test_interpolation_at_node_and_outside(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, lambda t, P, xi, theta: t + P + xi + theta)
    t, P, xi, theta = grid.axes
    assert interpolate_value(grid, t[1], State(P[2], xi[3], theta[1])) == pytest.approx(
        t[1] + P[2] + xi[3] + theta[1])
    _, outside = grid.interpolate(0.5, 10.0, 1.0, 0.0)
    assert bool(outside)


def test_value_grid_round_trip(frozen_model, small_spec, tmp_path):
    grid = solve_regularized(frozen_model, small_spec)
    grid.save(tmp_path)
    loaded = ValueGrid.load(tmp_path)
    assert loaded.spec == grid.spec
    assert loaded.params == grid.params
    assert np.array_equal(loaded.values, grid.values)
    assert np.array_equal(loaded.policy_index, grid.policy_index)


def test_value_grid_load_requires_files(tmp_path):
    with pytest.raises(MissingArtifactError):
        ValueGrid.load(tmp_path)


def test_ladder_single_solve_with_infinite_tolerance(frozen_model, small_spec):
    grid, report = solve_ladder(frozen_model, small_spec, 0.5, 3, [3.0], math.inf)
    assert report.converged
    assert len(report.rows) == 1
    assert grid.spec.epsilon == 0.5


def test_ladder_converges_on_frozen_model(frozen_model, small_spec):
    grid, report = solve_ladder(frozen_model, small_spec, 0.5, 2, [3.0, 3.5], 1e-6)
    assert report.converged
    assert report.final_rho == 3.5
    assert [row.stage for row in report.rows] == ["epsilon", "epsilon", "rho"]
    assert all(row.difference <= 1e-6 for row in report.rows)


def test_ladder_reports_non_convergence(desk_model, small_spec):
    _, report = solve_ladder(desk_model, small_spec, 0.5, 1, [3.0], 1e-12)
    assert not report.converged
    assert report.rows[-1].difference > 1e-12


@pytest.fixture
def coarse_desk_spec(control_grid):
    return GridSpec(nP=9, nXi=9, nTheta=9, nT=11, control_grid=control_grid)


def test_desk_ladder_differences_shrink_in_n(desk_model, coarse_desk_spec):
    _, report = solve_ladder(desk_model, coarse_desk_spec, 0.5, 4, [4.0], 1e-12)
    differences = [row.difference for row in report.rows if row.stage == "epsilon"]
    assert len(differences) == 4
    assert all(b <= a for a, b in zip(differences, differences[1:]))
    assert report.monotone_in_n["4.0"]


def test_desk_ladder_differences_shrink_in_rho(desk_model, coarse_desk_spec):
    _, report = solve_ladder(desk_model, coarse_desk_spec, 0.5, 4, [3.0, 4.0, 5.0], 2e-2)
    assert [row.rho for row in report.rows if row.stage == "rho"] == [4.0, 5.0][:len(report.rho_differences)]
    assert report.rho_differences
    assert report.monotone_in_rho
    assert report.to_dict()["rho_differences"] == report.rho_differences


def test_ladder_report_flags_growing_rho_differences():
    report = LadderReport(tol=1e-2, epsilon0=0.5, rho_schedule=[3.0, 4.0, 5.0])
    assert report.monotone_in_rho
    report.rho_differences.extend([0.1, 0.05])
    assert report.monotone_in_rho
    report.rho_differences.append(0.2)
    assert not report.monotone_in_rho
    assert report.to_dict()["monotone_in_rho"] is False


def test_ladder_rejects_bad_budget(frozen_model, small_spec):
    with pytest.raises(ModelValidationError):
        solve_ladder(frozen_model, small_spec, 1.0, 2, [3.0], 1e-2)
    with pytest.raises(ModelValidationError):
        solve_ladder(frozen_model, small_spec, 0.5, 2, [3.5, 3.0], 1e-2)


def test_greedy_policy_defaults_on_ties(frozen_model, small_spec):
    grid = solve_regularized(frozen_model, small_spec)
    assert np.all(grid.policy_index == 0)
    policy = extract_policy(frozen_model, grid)
    assert policy(0.5, State(2.0, 1.0, 0.0)) == Control(0.0, 0.0)


def test_greedy_policy_avoids_expensive_effort(desk_model, small_spec):
    params = desk_model.model_copy(update={"k": 1e6})
    grid = solve_regularized(params, small_spec)
    eta, _ = small_spec.control_grid.flat_controls()
    assert np.all(eta[grid.policy_index] == 0.0)


def test_greedy_policy_lookup(desk_model, small_spec):
    grid = solve_regularized(desk_model, small_spec)
    policy = extract_policy(desk_model, grid)
    t, P, xi, theta = grid.axes
    k = int(grid.policy_index[1, 2, 3, 2])
    expected = small_spec.control_grid.control(k)
    assert policy(t[1], State(P[2], xi[3], theta[2])) == expected
    assert policy(0.5, State(50.0, 1.0, 0.0)) == Control(0.0, 0.0)
    assert policy.extrapolated == 1
    assert len(list(policy.rows())) == grid.values.size


def test_policy_table_on_frozen_model(frozen_model, small_spec):
    grid = solve_regularized(frozen_model, small_spec)
    table = synthesize_discrete_policy(frozen_model, grid, M=2, K0=8, delta=0.25, eps_target=0.1)
    assert table.M == 2 and table.K0 == 8
    assert not table.fallback.any()
    assert table.fallback_fraction == 0.0
    assert table.geometry()["fallback_fraction"] == 0.0
    assert np.all(table.eta == 0.0) and np.all(table.c == 0.0)
    assert np.max(np.abs(table.residual)) < 1e-8
    assert table.slab_width == pytest.approx((frozen_model.T - 0.25) / 2)


def test_single_cell_table_is_constant(desk_model, small_spec):
    grid = solve_regularized(desk_model, small_spec)
    table = synthesize_discrete_policy(desk_model, grid, M=1, K0=1, delta=0.25, eps_target=10.0)
    a = table.control_at(0.1, State(1.2, 0.5, -2.0))
    b = table.control_at(0.6, State(2.5, 2.5, 2.5))
    assert a == b
    # past T - delta and outside the region the default control applies
    assert table.control_at(0.9, State(2.0, 1.0, 0.0)) == Control(0.0, 0.0)
    assert table.control_at(0.1, State(2.9, 1.0, 0.0)) == Control(0.0, 0.0)


def test_policy_table_rejects_bad_geometry(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    with pytest.raises(ModelValidationError):
        synthesize_discrete_policy(frozen_model, grid, M=0, K0=1, delta=0.25, eps_target=0.1)
    with pytest.raises(ModelValidationError):
        synthesize_discrete_policy(frozen_model, grid, M=1, K0=1, delta=2.5, eps_target=0.1)


def test_policy_table_round_trip(desk_model, small_spec, tmp_path):
    grid = solve_regularized(desk_model, small_spec)
    table = synthesize_discrete_policy(desk_model, grid, M=2, K0=4, delta=0.25, eps_target=1.0)
    path = tmp_path / "policy_table.csv"
    assert table.save(path, preamble=["seed 0"])
    loaded = PolicyTable.load(path)
    assert np.array_equal(loaded.eta, table.eta)
    assert np.array_equal(loaded.c, table.c)
    assert np.array_equal(loaded.slab_edges, table.slab_edges)
    assert loaded.geometry() == table.geometry()


@pytest.mark.parametrize("K0,expected", [(1, (1, 1, 1)), (7, (7, 1, 1)), (8, (2, 2, 2)), (12, (3, 2, 2))])
def test_balanced_factors(K0, expected):
    assert _balanced_factors(K0) == expected


def test_value_bound_audit_passes(desk_model, small_spec):
    audit = audit_value_bound(desk_model, solve_regularized(desk_model, small_spec))
    assert audit.passed
    assert audit.checked_nodes == int(np.prod(small_spec.shape))
    assert audit.worst_ratio < 1.0

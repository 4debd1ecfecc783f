import math

import pytest

from modules.dpp import (
    StoppingRule,
    candidate_controls,
    verify_dp_lower,
    verify_dp_upper,
)
from modules.hjb import extract_policy, solve_regularized
from modules.model import Control, State
from modules.sde import SimConfig, estimate_cost
from utils.errors import ModelValidationError

START = State(2.0, 1.0, 0.0)


@pytest.fixture
def frozen_grid(frozen_model, small_spec):
    return solve_regularized(frozen_model, small_spec)


@pytest.fixture
def desk_grid(desk_model, small_spec):
    return solve_regularized(desk_model, small_spec)


def test_rule_at_start_time_is_exact(frozen_model, frozen_grid, sim_config):
    rule = StoppingRule(kind="fixed_time", time=0.0)
    controls = candidate_controls(frozen_grid.spec.control_grid)
    lower = verify_dp_lower(frozen_model, frozen_grid, 0.0, START, rule, controls, sim_config, tolerance=0.0)
    upper = verify_dp_upper(frozen_model, frozen_grid, 0.0, START, rule, Control(1.0, 1.0), sim_config, delta=0.0)
    assert lower.passed and upper.passed
    assert lower.gap == 0.0 and upper.gap == 0.0
    assert all(row.std_error == 0.0 for row in lower.rows)


def test_frozen_model_satisfies_both_sides(frozen_model, frozen_grid):
    mc = SimConfig(dt=0.02, n_paths=1000, seed=4)
    controls = candidate_controls(frozen_grid.spec.control_grid, greedy=extract_policy(frozen_model, frozen_grid))
    rule = StoppingRule(kind="horizon")
    lower = verify_dp_lower(frozen_model, frozen_grid, 0.0, START, rule, controls, mc, tolerance=1e-2)
    assert lower.passed
    assert lower.v_at_start == pytest.approx(-2.0, abs=1e-10)
    upper = verify_dp_upper(frozen_model, frozen_grid, 0.0, START, rule, Control(0.0, 0.0), mc, delta=1e-2)
    assert upper.passed


def test_first_exit_rule_interpolates_stopped_values(frozen_model, frozen_grid):
    mc = SimConfig(dt=0.02, n_paths=500, seed=2)
    rule = StoppingRule(kind="first_exit", radius=0.3)
    report = verify_dp_lower(frozen_model, frozen_grid, 0.0, START, rule, [("zero", Control(0.0, 0.0))],
                             mc, tolerance=1e-2)
    assert report.passed
    assert report.rule == "first_exit_0.3"


def test_horizon_rule_matches_cost_estimate(desk_model, desk_grid):
    mc = SimConfig(dt=0.05, n_paths=300, seed=11)
    u = Control(0.5, 1.0)
    report = verify_dp_lower(desk_model, desk_grid, 0.0, START, StoppingRule(), [("u", u)], mc, tolerance=1e-2)
    truncated = mc.model_copy(update={"rho_trunc": desk_grid.spec.rho})
    estimate = estimate_cost(desk_model, truncated, 0.0, START, u)
    assert report.rows[0].mean == pytest.approx(estimate.mean, rel=1e-12)
    assert report.rows[0].std_error == pytest.approx(estimate.std_error, rel=1e-12)


def test_costly_constant_control_fails_upper_check(desk_model, small_spec):
    params = desk_model.model_copy(update={"k": 5.0})
    grid = solve_regularized(params, small_spec)
    mc = SimConfig(dt=0.05, n_paths=300, seed=1)
    report = verify_dp_upper(params, grid, 0.0, START, StoppingRule(), Control(params.N, params.C), mc,
                             delta=1e-2, label="max_effort")
    assert not report.passed
    assert report.gap > 1.0
    assert report.rows[0].label == "max_effort"


def test_gap_is_stable_across_seeds(desk_model, desk_grid):
    policy = extract_policy(desk_model, desk_grid)
    reports = [verify_dp_upper(desk_model, desk_grid, 0.0, START, StoppingRule(), policy,
                               SimConfig(dt=0.05, n_paths=400, seed=seed), delta=1e-2)
               for seed in (1, 2)]
    se = math.hypot(reports[0].rows[0].std_error, reports[1].rows[0].std_error)
    assert abs(reports[0].gap - reports[1].gap) <= 4.0 * se + 1e-12


def test_candidate_controls(desk_model, desk_grid):
    greedy = extract_policy(desk_model, desk_grid)
    candidates = candidate_controls(desk_grid.spec.control_grid, greedy=greedy)
    assert len(candidates) == desk_grid.spec.control_grid.size + 1
    assert candidates[-1] == ("greedy", greedy)


def test_report_table(frozen_model, frozen_grid, sim_config, tmp_path):
    rule = StoppingRule(kind="fixed_time", time=0.5)
    controls = candidate_controls(frozen_grid.spec.control_grid)
    report = verify_dp_lower(frozen_model, frozen_grid, 0.0, START, rule, controls, sim_config, tolerance=1e-2)
    assert report.write_table(tmp_path / "dpp.csv")
    assert len(report.to_dict()["candidates"]) == len(controls)


def test_rule_validation(frozen_model, frozen_grid, sim_config):
    controls = candidate_controls(frozen_grid.spec.control_grid)
    with pytest.raises(ModelValidationError):
        verify_dp_lower(frozen_model, frozen_grid, 0.0, START, StoppingRule(kind="fixed_time"), controls,
                        sim_config, tolerance=0.0)
    with pytest.raises(ModelValidationError):
        verify_dp_lower(frozen_model, frozen_grid, 0.0, START, StoppingRule(kind="first_exit"), controls,
                        sim_config, tolerance=0.0)
    with pytest.raises(ModelValidationError):
        verify_dp_lower(frozen_model, frozen_grid, 0.0, START, StoppingRule(), [], sim_config, tolerance=0.0)
    with pytest.raises(ModelValidationError):
        verify_dp_upper(frozen_model, frozen_grid, 0.0, START, StoppingRule(), Control(0.0, 0.0), sim_config,
                        delta=-1.0)

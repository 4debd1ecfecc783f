import math

import numpy as np
import pytest

from modules.hjb import GridSpec, solve_regularized
from modules.model import TimeFunction
from modules.viscosity import (
    JetKind,
    check_comparison,
    check_subsolution,
    check_supersolution,
    default_sites,
    probe_jets,
    scaled_tolerance,
)
from utils.errors import GridMismatchError, JetFitError
from tests.helpers import make_grid, minus_p_xi


@pytest.fixture
def fine_spec(control_grid):
    return GridSpec(rho=3.0, nP=5, nXi=5, nTheta=5, nT=5, control_grid=control_grid)


@pytest.fixture
def noisy_theta_model(frozen_model):
    return frozen_model.model_copy(update={"theta_vol": TimeFunction(kind="constant", coefficients=(1.0,))})


def test_jets_of_boundary_data(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    super_jet, sub_jet = probe_jets(grid, (1, 2, 2, 2))
    _, x = super_jet.site
    assert super_jet.kind == JetKind.SUPER and sub_jet.kind == JetKind.SUB
    assert super_jet.q == pytest.approx(0.0, abs=1e-8)
    assert super_jet.p == pytest.approx(np.array([-x.xi, -x.P, 0.0]), abs=1e-8)
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 0] = -1.0
    assert np.allclose(super_jet.A, expected, atol=1e-8)
    assert np.allclose(sub_jet.A, super_jet.A)


def test_jets_of_constant_grid_vanish(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, lambda t, P, xi, theta: 3.0)
    jet, _ = probe_jets(grid, (1, 2, 2, 2))
    assert jet.q == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(jet.p, 0.0, atol=1e-10)
    assert np.allclose(jet.A, 0.0, atol=1e-10)


def test_jets_recover_a_quadratic(frozen_model, small_spec):
    def quadratic(t, P, xi, theta):
        return 1.0 + 0.5 * t + 2.0 * P - xi + 0.25 * theta + P ** 2 + P * xi - 0.5 * theta ** 2 + t * theta

    grid = make_grid(frozen_model, small_spec, quadratic)
    jet, _ = probe_jets(grid, (1, 2, 2, 2))
    t, x = jet.site
    assert jet.q == pytest.approx(0.5 + x.theta, abs=1e-8)
    assert jet.p == pytest.approx(np.array([2.0 + 2.0 * x.P + x.xi, -1.0 + x.P, 0.25 - x.theta + t]), abs=1e-8)
    assert np.allclose(jet.A, [[2.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]], atol=1e-8)


def test_probe_rejects_sites_near_the_edge(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    with pytest.raises(JetFitError):
        probe_jets(grid, (0, 2, 2, 2))
    with pytest.raises(JetFitError):
        probe_jets(grid, (1, 2, 2, 2), stencil_radius=2)


def test_exact_solution_passes_both_checks(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    sub = check_subsolution(frozen_model, grid, tolerance=1e-2)
    sup = check_supersolution(frozen_model, grid, tolerance=1e-2)
    assert sub.n_violations == 0 and sup.n_violations == 0
    assert sub.passed and sup.passed
    assert sub.n_boundary_sites > 0
    assert sub.n_sites == len(default_sites(grid))


def test_dip_violates_supersolution_only(noisy_theta_model, fine_spec):
    grid = make_grid(noisy_theta_model, fine_spec, minus_p_xi)
    grid.values[2, 2, 2, 2] -= 10.0
    site = [(2, 2, 2, 2)]
    assert check_subsolution(noisy_theta_model, grid, sample=site).n_violations == 0
    sup = check_supersolution(noisy_theta_model, grid, sample=site)
    assert sup.n_violations == 1
    assert sup.worst_residual < -1e-2


def test_bump_violates_subsolution_only(noisy_theta_model, fine_spec):
    grid = make_grid(noisy_theta_model, fine_spec, minus_p_xi)
    grid.values[2, 2, 2, 2] += 10.0
    site = [(2, 2, 2, 2)]
    assert check_subsolution(noisy_theta_model, grid, sample=site).n_violations == 1
    assert check_supersolution(noisy_theta_model, grid, sample=site).n_violations == 0


def test_raised_boundary_face_violates_subsolution(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    grid.values[:, 0] += 1.0
    face = [index for index in np.ndindex(*small_spec.shape) if index[1] == 0]
    sub = check_subsolution(frozen_model, grid, sample=face)
    assert sub.n_violations == len(face)
    assert check_supersolution(frozen_model, grid, sample=face).n_violations == 0


def test_infinite_tolerance_accepts_everything(desk_model, small_spec):
    grid = make_grid(desk_model, small_spec, lambda t, P, xi, theta: np.sin(3 * P) * xi + theta ** 3)
    assert check_subsolution(desk_model, grid, tolerance=math.inf).n_violations == 0
    assert check_supersolution(desk_model, grid, tolerance=math.inf).n_violations == 0


def test_reflection_duality(desk_model, small_spec):
    grid = solve_regularized(desk_model, small_spec)
    grid.values[1] += 0.3 * np.cos(np.arange(grid.values[1].size)).reshape(grid.values[1].shape)
    mirrored = make_grid(desk_model, small_spec, lambda *_: 0.0)
    mirrored.values = -grid.values
    sub = check_subsolution(desk_model, grid, tolerance=1e-3)
    reflected = check_supersolution(desk_model, mirrored, tolerance=1e-3, reflect=True)
    assert sub.n_violations == reflected.n_violations
    assert sub.n_sites == reflected.n_sites


def test_residual_table_has_one_row_per_site(frozen_model, small_spec, tmp_path):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    report = check_subsolution(frozen_model, grid)
    assert len(report.residuals) == report.n_sites
    assert report.write_residuals(tmp_path / "residuals.csv")
    assert report.to_dict()["passed"]


def test_scaled_tolerance(frozen_model, small_spec):
    grid = make_grid(frozen_model, small_spec, minus_p_xi)
    # largest spatial step is the theta step 6 / 4, the time step is 1 / 2
    assert scaled_tolerance(grid, 2.0) == pytest.approx(4.0)


def test_comparison_of_ordered_grids(desk_model, small_spec):
    cheap = solve_regularized(desk_model, small_spec)
    dear = solve_regularized(desk_model.model_copy(update={"k": 2.0}), small_spec)
    assert check_comparison(cheap, cheap, 1e-12).max_difference == 0.0
    shifted = make_grid(desk_model, small_spec, lambda *_: 0.0)
    shifted.values = cheap.values - 0.5
    report = check_comparison(shifted, cheap, 1e-2)
    assert report.passed
    assert report.max_difference == pytest.approx(-0.5)
    assert check_comparison(cheap, dear, 1e-12).passed


def test_comparison_rejects_mismatched_grids(frozen_model, small_spec, fine_spec):
    with pytest.raises(GridMismatchError):
        check_comparison(make_grid(frozen_model, small_spec, minus_p_xi),
                         make_grid(frozen_model, fine_spec, minus_p_xi), 1e-2)

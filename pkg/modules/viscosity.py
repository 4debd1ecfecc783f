"""
Numerical viscosity sub/supersolution probes for a solved value grid.

Interior sites get a local full quadratic in (t, P, xi, theta) fitted by least
squares over a symmetric stencil; the fitted (q, p, A) stands in for an
element of both closed semijets. Boundary sites are checked against the
boundary data -P xi directly.
"""

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.hjb import ValueGrid
from modules.model import ControlGrid, ModelParams, State, hamiltonian_batch, terminal_boundary_value
from utils.errors import GridMismatchError, JetFitError, ModelValidationError
from utils.file_handler import write_csv_file
from utils.logger import setup_logger

logger = setup_logger(__name__)

PASS_FRACTION = 0.99
N_FEATURES = 15

Site = Tuple[int, int, int, int]


class JetKind(str, Enum):
    SUPER = "super"
    SUB = "sub"


@dataclass
class SemiJet:
    """Candidate (q, p, A) at a site"""
    q: float
    p: np.ndarray
    A: np.ndarray
    site: Tuple[float, State]
    kind: JetKind


@dataclass
class ViscosityReport:
    """Violation counts of one sub- or supersolution check"""
    kind: str
    tolerance: float
    n_sites: int = 0
    n_boundary_sites: int = 0
    n_violations_sub: int = 0
    n_violations_super: int = 0
    worst_residual: float = 0.0
    worst_site: Optional[Dict[str, float]] = None
    skipped_sites: int = 0
    residuals: List[Tuple[float, ...]] = field(default_factory=list, repr=False)

    @property
    def n_violations(self) -> int:
        return self.n_violations_sub if self.kind == JetKind.SUB.value else self.n_violations_super

    @property
    def passed(self) -> bool:
        return self.n_violations <= math.floor((1.0 - PASS_FRACTION) * self.n_sites)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "tolerance": self.tolerance if math.isfinite(self.tolerance) else "inf",
            "n_sites": self.n_sites,
            "n_boundary_sites": self.n_boundary_sites,
            "n_violations_sub": self.n_violations_sub,
            "n_violations_super": self.n_violations_super,
            "worst_residual": self.worst_residual,
            "worst_site": self.worst_site,
            "skipped_sites": self.skipped_sites,
        }

    def write_residuals(self, path: Path) -> bool:
        return write_csv_file(path, ["t", "P", "xi", "theta", "site_kind", "residual", "violated"],
                              self.residuals)


def _design(radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stencil offsets in index units and the least-squares matrix of the quadratic features."""
    offsets = np.array(list(itertools.product(range(-radius, radius + 1), repeat=4)), dtype=float)
    columns = [np.ones(len(offsets))]
    columns += [offsets[:, k] for k in range(4)]
    columns += [0.5 * offsets[:, k] ** 2 for k in range(4)]
    columns += [offsets[:, k] * offsets[:, l] for k, l in itertools.combinations(range(4), 2)]
    design = np.stack(columns, axis=1)
    if np.linalg.matrix_rank(design) < N_FEATURES:
        raise JetFitError(f"stencil radius {radius} cannot determine a quadratic fit")
    return offsets.astype(int), np.linalg.pinv(design)


def _steps(grid: ValueGrid) -> np.ndarray:
    return np.array([axis[1] - axis[0] for axis in grid.axes])


def _fit_jets(grid: ValueGrid, sites: np.ndarray, radius: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized jets at interior sites (n, 4): q (n,), p (3, n), A (3, 3, n) in physical units."""
    offsets, solver = _design(radius)
    stencil_index = sites[:, None, :] + offsets[None, :, :]
    samples = grid.values[tuple(stencil_index[..., k] for k in range(4))]
    coefficients = samples @ solver.T  # (n, 15)
    steps = _steps(grid)
    gradient = coefficients[:, 1:5] / steps[None, :]
    hessian = np.zeros((len(sites), 4, 4))
    for k in range(4):
        hessian[:, k, k] = coefficients[:, 5 + k]
    for column, (k, l) in enumerate(itertools.combinations(range(4), 2)):
        hessian[:, k, l] = hessian[:, l, k] = coefficients[:, 9 + column]
    hessian = hessian / (steps[None, :, None] * steps[None, None, :])
    q = gradient[:, 0]
    p = gradient[:, 1:].T
    A = np.transpose(hessian[:, 1:, 1:], (1, 2, 0))
    return q, p, A


def _site_state(grid: ValueGrid, sites: np.ndarray) -> Tuple[np.ndarray, State]:
    t, P, xi, theta = grid.axes
    return t[sites[:, 0]], State(P[sites[:, 1]], xi[sites[:, 2]], theta[sites[:, 3]])


def probe_jets(grid: ValueGrid, site: Site, stencil_radius: int = 1) -> Tuple[SemiJet, SemiJet]:
    """
    Fit a local quadratic around site and return its (q, p, A) tagged as a
    super- and as a subjet.

    Raises:
        JetFitError: if the stencil does not fit inside the grid or cannot
            determine a quadratic
    """
    if not _fits(grid, np.array([site]), stencil_radius)[0]:
        raise JetFitError(f"stencil of radius {stencil_radius} around {site} leaves the grid")
    q, p, A = _fit_jets(grid, np.array([site]), stencil_radius)
    t, x = _site_state(grid, np.array([site]))
    location = (float(t[0]), State(float(x.P[0]), float(x.xi[0]), float(x.theta[0])))
    jets = [SemiJet(q=float(q[0]), p=p[:, 0].copy(), A=A[:, :, 0].copy(), site=location, kind=kind)
            for kind in (JetKind.SUPER, JetKind.SUB)]
    return jets[0], jets[1]


def _fits(grid: ValueGrid, sites: np.ndarray, radius: int) -> np.ndarray:
    shape = np.array(grid.values.shape)
    return np.all((sites >= radius) & (sites <= shape - 1 - radius), axis=1)


def _is_boundary(grid: ValueGrid, sites: np.ndarray) -> np.ndarray:
    nT, nP, nXi, nTheta = grid.values.shape
    spatial = sites[:, 1:]
    on_face = np.any((spatial == 0) | (spatial == np.array([nP, nXi, nTheta]) - 1), axis=1)
    return on_face | (sites[:, 0] == nT - 1)


def default_sites(grid: ValueGrid, stencil_radius: int = 1, max_sites: Optional[int] = None,
                  seed: int = 0) -> np.ndarray:
    """All boundary nodes and interior nodes at least stencil_radius cells from every face, optionally subsampled."""
    every = np.array(list(np.ndindex(*grid.values.shape)))
    keep = _is_boundary(grid, every) | _fits(grid, every, stencil_radius)
    sites = every[keep]
    if max_sites is not None and len(sites) > max_sites:
        chosen = np.random.default_rng(seed).choice(len(sites), size=max_sites, replace=False)
        sites = sites[np.sort(chosen)]
    return sites


def scaled_tolerance(grid: ValueGrid, c1: float) -> float:
    """c1 (dx + dt), dx the largest spatial step."""
    steps = _steps(grid)
    return c1 * (float(np.max(steps[1:])) + float(steps[0]))


def _check(params: ModelParams, grid: ValueGrid, control_grid: Optional[ControlGrid], tolerance: float,
           sample: Optional[Sequence[Site]], kind: JetKind, stencil_radius: int,
           epsilon: Optional[float], reflect: bool) -> ViscosityReport:
    if tolerance < 0:
        raise ModelValidationError(f"tolerance must be nonnegative, got {tolerance}")
    control_grid = control_grid or grid.spec.control_grid
    epsilon = grid.spec.epsilon if epsilon is None else epsilon
    sites = default_sites(grid, stencil_radius) if sample is None else np.array(sample, dtype=int).reshape(-1, 4)
    boundary = _is_boundary(grid, sites)
    interior = ~boundary & _fits(grid, sites, stencil_radius)
    report = ViscosityReport(kind=kind.value, tolerance=tolerance,
                             n_boundary_sites=int(np.count_nonzero(boundary)),
                             skipped_sites=int(np.count_nonzero(~boundary & ~interior)))
    sign = -1.0 if reflect else 1.0

    residual = np.full(len(sites), np.nan)
    t_all, x_all = _site_state(grid, sites)
    values = grid.values[tuple(sites.T)]
    if boundary.any():
        # reflected data is +P xi; sub asks v <= g, super asks v >= g
        data = sign * terminal_boundary_value(State(x_all.P[boundary], x_all.xi[boundary], x_all.theta[boundary]))
        residual[boundary] = values[boundary] - data
    if interior.any():
        q, p, A = _fit_jets(grid, sites[interior], stencil_radius)
        x = State(x_all.P[interior], x_all.xi[interior], x_all.theta[interior])
        H, _ = hamiltonian_batch(params, control_grid, t_all[interior], x, sign * p, sign * A, epsilon)
        residual[interior] = -q + sign * H

    checked = boundary | interior
    if kind == JetKind.SUB:
        violated = checked & (residual > tolerance)
        report.n_violations_sub = int(np.count_nonzero(violated))
        worst_index = int(np.nanargmax(residual)) if checked.any() else -1
    else:
        violated = checked & (residual < -tolerance)
        report.n_violations_super = int(np.count_nonzero(violated))
        worst_index = int(np.nanargmin(residual)) if checked.any() else -1

    report.n_sites = int(np.count_nonzero(checked))
    if worst_index >= 0:
        report.worst_residual = float(residual[worst_index])
        report.worst_site = {"t": float(t_all[worst_index]), "P": float(x_all.P[worst_index]),
                             "xi": float(x_all.xi[worst_index]), "theta": float(x_all.theta[worst_index])}
    report.residuals = [(float(t_all[i]), float(x_all.P[i]), float(x_all.xi[i]), float(x_all.theta[i]),
                         "boundary" if boundary[i] else "interior", float(residual[i]), int(violated[i]))
                        for i in np.flatnonzero(checked)]
    logger.info(f"{kind.value}solution check: {report.n_violations} violations over {report.n_sites} sites "
                f"(tolerance {tolerance:.3g}, worst residual {report.worst_residual:.3g})")
    return report


def check_subsolution(params: ModelParams, grid: ValueGrid, control_grid: Optional[ControlGrid] = None,
                      tolerance: float = 1e-2, sample: Optional[Sequence[Site]] = None,
                      stencil_radius: int = 1, epsilon: Optional[float] = None,
                      reflect: bool = False) -> ViscosityReport:
    """
    Count sites where -q + H(t, x, p, A) > tolerance, or on the boundary
    v > -P xi + tolerance.

    Args:
        params: Model parameters
        grid: Candidate value function
        control_grid: Controls of the Hamiltonian, the grid's own by default
        tolerance: Violation threshold
        sample: Node index tuples (t, P, xi, theta), all eligible nodes by default
        stencil_radius: Half-width of the fitting stencil in cells
        epsilon: Regularization of the Hamiltonian, the grid's own by default
        reflect: Use H~(p, A) = -H(-p, -A) and boundary data +P xi
    """
    return _check(params, grid, control_grid, tolerance, sample, JetKind.SUB, stencil_radius, epsilon, reflect)


def check_supersolution(params: ModelParams, grid: ValueGrid, control_grid: Optional[ControlGrid] = None,
                        tolerance: float = 1e-2, sample: Optional[Sequence[Site]] = None,
                        stencil_radius: int = 1, epsilon: Optional[float] = None,
                        reflect: bool = False) -> ViscosityReport:
    """Mirror image of check_subsolution: violations are residuals below -tolerance."""
    return _check(params, grid, control_grid, tolerance, sample, JetKind.SUPER, stencil_radius, epsilon, reflect)


@dataclass
class ComparisonReport:
    max_difference: float
    tolerance: float
    worst_node: Dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_difference <= self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "max_difference": self.max_difference,
                "tolerance": self.tolerance, "worst_node": self.worst_node}


def check_comparison(gridW: ValueGrid, gridV: ValueGrid, tolerance: float) -> ComparisonReport:
    """max over nodes of W - V must not exceed tolerance."""
    if gridW.spec != gridV.spec:
        raise GridMismatchError("comparison needs grids with identical GridSpecs")
    difference = gridW.values - gridV.values
    index = np.unravel_index(int(np.argmax(difference)), difference.shape)
    t, P, xi, theta = gridW.axes
    worst = {"t": float(t[index[0]]), "P": float(P[index[1]]), "xi": float(xi[index[2]]),
             "theta": float(theta[index[3]])}
    report = ComparisonReport(max_difference=float(difference[index]), tolerance=tolerance, worst_node=worst)
    logger.info(f"Comparison: max(W - V) = {report.max_difference:.4g} (tolerance {tolerance:.3g})")
    return report

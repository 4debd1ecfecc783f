"""
Regularized, truncated HJB solver on a uniform (t, P, xi, theta) grid.

The scheme is explicit and monotone: upwind drift differences, centered
diagonal second differences and the 7-point positive/negative splitting of
every cross derivative. Where the splitting is not monotone at a node the
diagonal of the diffusion matrix is inflated there and the inflation is
counted in the grid diagnostics.
"""

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config.settings import (
    CFL_SAFETY,
    TIE_RTOL,
    VALUE_GRID_HEADER_FILE,
    VALUE_GRID_VALUES_FILE,
)
from modules.model import (
    DEFAULT_CONTROL,
    Control,
    ControlGrid,
    ModelParams,
    State,
    cost_growth_bound,
    derived_K,
    drift_vector,
    running_cost,
    terminal_boundary_value,
    truncation_cutoff,
    vol_vector,
)
from utils.errors import GridMismatchError, MissingArtifactError, ModelValidationError, SimulationError
from utils.file_handler import (
    file_exists,
    read_csv_file,
    read_json_file,
    read_text_file,
    write_csv_file,
    write_json_file,
)
from utils.logger import setup_logger

logger = setup_logger(__name__)

# neighbour offsets of the stencil: 6 axis neighbours, then 4 diagonal
# neighbours for each coordinate pair
AXIS_OFFSETS = [tuple(sign if k == i else 0 for k in range(3)) for i in range(3) for sign in (1, -1)]
PAIRS = [(0, 1), (0, 2), (1, 2)]
PAIR_SIGNS = [(1, 1), (-1, -1), (1, -1), (-1, 1)]
CROSS_OFFSETS = [tuple(si if k == i else sj if k == j else 0 for k in range(3))
                 for i, j in PAIRS for si, sj in PAIR_SIGNS]
OFFSETS = AXIS_OFFSETS + CROSS_OFFSETS


class GridSpec(BaseModel):
    """Uniform grid over [0, T] x [R, rho] x [1/rho, rho] x [-H, H]."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rho: float = Field(4.0, gt=0)
    nP: int = Field(11, ge=3)
    nXi: int = Field(11, ge=3)
    nTheta: int = Field(11, ge=3)
    nT: int = Field(11, ge=2)
    epsilon: float = Field(0.0, ge=0)
    control_grid: ControlGrid = ControlGrid()

    def validate_for(self, params: ModelParams) -> "GridSpec":
        if self.rho <= max(params.R, 1.0):
            raise ModelValidationError(f"rho={self.rho} must exceed both R={params.R} and 1")
        self.control_grid.check_endpoints(params)
        return self

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (self.nT, self.nP, self.nXi, self.nTheta)


def grid_axes(params: ModelParams, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Node coordinates (t, P, xi, theta), every axis including its endpoints."""
    return (np.linspace(0.0, params.T, spec.nT),
            np.linspace(params.R, spec.rho, spec.nP),
            np.linspace(1.0 / spec.rho, spec.rho, spec.nXi),
            np.linspace(-params.H, params.H, spec.nTheta))


def _multilinear(values: np.ndarray, axes: Sequence[np.ndarray],
                 queries: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolation of values on a tensor grid; queries are clamped to the hull."""
    queries = np.broadcast_arrays(*(np.asarray(q, dtype=float) for q in queries))
    outside = np.zeros(queries[0].shape, dtype=bool)
    lower, weight = [], []
    for nodes, q in zip(axes, queries):
        span = nodes[-1] - nodes[0]
        outside |= (q < nodes[0] - 1e-12 * span) | (q > nodes[-1] + 1e-12 * span)
        qc = np.clip(q, nodes[0], nodes[-1])
        i0 = np.clip(np.searchsorted(nodes, qc, side="right") - 1, 0, len(nodes) - 2)
        lower.append(i0)
        weight.append(np.clip((qc - nodes[i0]) / (nodes[i0 + 1] - nodes[i0]), 0.0, 1.0))

    result = np.zeros(queries[0].shape)
    for corner in itertools.product((0, 1), repeat=len(axes)):
        w = np.ones(queries[0].shape)
        index = []
        for bit, i0, wk in zip(corner, lower, weight):
            w = w * (wk if bit else 1.0 - wk)
            index.append(i0 + bit)
        result = result + w * values[tuple(index)]
    return result, outside


@dataclass
class ValueGrid:
    """Solved value function with the node-wise minimizing control index"""
    spec: GridSpec
    params: ModelParams
    values: np.ndarray
    policy_index: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def axes(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return grid_axes(self.params, self.spec)

    def interpolate(self, t: Any, P: Any, xi: Any, theta: Any) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized value lookup: (values, mask of queries clamped from outside the hull)."""
        return _multilinear(self.values, self.axes, (t, P, xi, theta))

    def save(self, directory: Path, header_extra: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
        """
        Write the JSON header and the values CSV.

        Rows are in C order of (t_index, P_index, xi_index, theta_index).
        """
        directory = Path(directory)
        header = {
            "spec": self.spec.model_dump(mode="json"),
            "params": self.params.model_dump(mode="json"),
            "shape": list(self.values.shape),
            "index_order": ["t", "P", "xi", "theta"],
            "diagnostics": self.diagnostics,
        }
        header.update(header_extra or {})
        header_path = directory / VALUE_GRID_HEADER_FILE
        values_path = directory / VALUE_GRID_VALUES_FILE
        write_json_file(header_path, header)

        t, P, xi, theta = self.axes
        eta, c = self.spec.control_grid.flat_controls()

        def rows():
            for index in np.ndindex(*self.values.shape):
                it, ip, ix, ih = index
                k = int(self.policy_index[index])
                yield (it, ip, ix, ih, float(t[it]), float(P[ip]), float(xi[ix]), float(theta[ih]),
                       float(self.values[index]), k, float(eta[k]), float(c[k]))

        write_csv_file(values_path,
                       ["t_index", "P_index", "xi_index", "theta_index", "t", "P", "xi", "theta",
                        "value", "policy_index", "eta", "c"],
                       rows(), preamble=[json.dumps(header.get("run", {}), sort_keys=True)])
        return header_path, values_path

    @classmethod
    def load(cls, directory: Path) -> "ValueGrid":
        directory = Path(directory)
        header_path = directory / VALUE_GRID_HEADER_FILE
        values_path = directory / VALUE_GRID_VALUES_FILE
        if not (file_exists(header_path) and file_exists(values_path)):
            raise MissingArtifactError(f"no solved value grid in {directory}; run the solve command first")
        header = read_json_file(header_path)
        spec = GridSpec.model_validate(header["spec"])
        params = ModelParams.model_validate(header["params"])
        values = np.empty(spec.shape)
        policy = np.zeros(spec.shape, dtype=int)
        for row in read_csv_file(values_path):
            index = (int(row["t_index"]), int(row["P_index"]), int(row["xi_index"]), int(row["theta_index"]))
            values[index] = float(row["value"])
            policy[index] = int(row["policy_index"])
        return cls(spec=spec, params=params, values=values, policy_index=policy,
                   diagnostics=header.get("diagnostics", {}))


@dataclass
class _Stencil:
    """Frozen coefficients of one time interval, per grid control"""
    weights: np.ndarray   # (n_controls, n_offsets, n_sites)
    cost: np.ndarray      # (n_controls, n_sites)
    max_rate: float
    inflated_nodes: int
    max_inflation: float


class HjbSolver:
    """Explicit monotone backward sweep for one GridSpec"""

    def __init__(self, params: ModelParams, spec: GridSpec):
        self.params = params
        self.spec = spec.validate_for(params)
        self.t_nodes, self.P_nodes, self.xi_nodes, self.theta_nodes = grid_axes(params, spec)
        self.h = np.array([self.P_nodes[1] - self.P_nodes[0],
                           self.xi_nodes[1] - self.xi_nodes[0],
                           self.theta_nodes[1] - self.theta_nodes[0]])
        P, xi, theta = np.meshgrid(self.P_nodes, self.xi_nodes, self.theta_nodes, indexing="ij")
        self.nodes = State(P, xi, theta)
        self.boundary_values = terminal_boundary_value(self.nodes)
        self.interior_shape = (spec.nP - 2, spec.nXi - 2, spec.nTheta - 2)
        self.interior = State(P[1:-1, 1:-1, 1:-1].ravel(), xi[1:-1, 1:-1, 1:-1].ravel(),
                              theta[1:-1, 1:-1, 1:-1].ravel())
        self.cutoff = truncation_cutoff(params, spec.rho, self.interior)
        self.eta, self.c = spec.control_grid.flat_controls()

    def coefficients(self, t: float) -> _Stencil:
        """Stencil weights and running costs at time t for every grid control."""
        h = self.h
        weights, costs = [], []
        max_rate, inflated, max_inflation = 0.0, 0, 0.0
        for eta, c in zip(self.eta, self.c):
            u = Control(float(eta), float(c))
            f = drift_vector(self.params, t, self.interior, u) * self.cutoff
            sig = vol_vector(self.params, t, self.interior, u) * self.cutoff
            a = sig[:, None] * sig[None, :] + self.spec.epsilon ** 2 * np.eye(3)[:, :, None]
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(a))):
                raise SimulationError(f"non-finite coefficients at t={t}", {"t": t, "eta": eta, "c": c})

            # diagonal dominance needed by the cross-term splitting
            off = np.abs(a) / h[None, :, None]
            deficit = np.stack([h[i] * (np.sum(off[i], axis=0) - off[i, i]) - a[i, i] for i in range(3)])
            lam = np.maximum(0.0, np.max(deficit, axis=0))
            if np.any(lam > 0):
                inflated += int(np.count_nonzero(lam > 0))
                max_inflation = max(max_inflation, float(np.max(lam)))
                a = a + lam[None, None, :] * np.eye(3)[:, :, None]

            w = []
            for i in range(3):
                cross = sum(np.abs(a[i, j]) / (2.0 * h[i] * h[j]) for j in range(3) if j != i)
                second = 0.5 * a[i, i] / h[i] ** 2 - cross
                w.append(second + np.maximum(f[i], 0.0) / h[i])
                w.append(second + np.maximum(-f[i], 0.0) / h[i])
            for i, j in PAIRS:
                scale = 2.0 * h[i] * h[j]
                positive = np.maximum(a[i, j], 0.0) / scale
                negative = np.maximum(-a[i, j], 0.0) / scale
                w.extend([positive, positive, negative, negative])
            weights.append(np.stack(w))
            costs.append(running_cost(self.params, self.interior, u) * self.cutoff)

            rate = sum(a[i, i] / h[i] ** 2 + np.abs(f[i]) / h[i] for i in range(3))
            max_rate = max(max_rate, float(np.max(rate)) if rate.size else 0.0)

        return _Stencil(np.stack(weights), np.stack(costs), max_rate, inflated, max_inflation)

    def stable_dt(self, stencil: _Stencil) -> float:
        return math.inf if stencil.max_rate == 0 else CFL_SAFETY / stencil.max_rate

    def _differences(self, V: np.ndarray) -> np.ndarray:
        nP, nXi, nTh = V.shape
        centre = V[1:-1, 1:-1, 1:-1]
        return np.stack([(V[1 + d0:nP - 1 + d0, 1 + d1:nXi - 1 + d1, 1 + d2:nTh - 1 + d2] - centre).ravel()
                         for d0, d1, d2 in OFFSETS])

    def operator_values(self, V: np.ndarray, stencil: _Stencil) -> np.ndarray:
        """Discrete generator plus running cost, shape (n_controls, n_interior_nodes)."""
        return np.einsum("uks,ks->us", stencil.weights, self._differences(V)) + stencil.cost

    def step(self, V: np.ndarray, stencil: _Stencil, dt: float) -> np.ndarray:
        """One backward substep V(t - dt) = V(t) + dt min_u [A^u V + L]; boundary untouched."""
        updated = V.copy()
        G = self.operator_values(V, stencil)
        updated[1:-1, 1:-1, 1:-1] += dt * np.min(G, axis=0).reshape(self.interior_shape)
        return updated

    def policy_from(self, G: np.ndarray) -> np.ndarray:
        """Lowest control index within a relative tie tolerance of the minimum."""
        best = np.min(G, axis=0)
        tolerance = TIE_RTOL * np.maximum(1.0, np.abs(best))
        index = np.argmax(G <= best + tolerance, axis=0)
        # boundary nodes take the control of their nearest interior node
        return np.pad(index.reshape(self.interior_shape), 1, mode="edge")

    def solve(self) -> ValueGrid:
        spec = self.spec
        values = np.empty(spec.shape)
        policy = np.zeros(spec.shape, dtype=int)
        V = self.boundary_values.copy()
        values[-1] = V
        total_substeps, inflated, max_inflation, min_dt = 0, 0, 0.0, math.inf

        for j in range(spec.nT - 2, -1, -1):
            t_upper = float(self.t_nodes[j + 1])
            stencil = self.coefficients(t_upper)
            policy[j + 1] = self.policy_from(self.operator_values(V, stencil))
            interval = t_upper - float(self.t_nodes[j])
            n_sub = max(1, int(math.ceil(interval / self.stable_dt(stencil) - 1e-12)))
            dt_sub = interval / n_sub
            if n_sub > 1:
                logger.debug(f"Interval [{self.t_nodes[j]:.4g}, {t_upper:.4g}]: max rate "
                             f"{stencil.max_rate:.4g}, {n_sub} substeps of {dt_sub:.3g}")
            for _ in range(n_sub):
                V = self.step(V, stencil, dt_sub)
            values[j] = V
            total_substeps += n_sub
            inflated += stencil.inflated_nodes
            max_inflation = max(max_inflation, stencil.max_inflation)
            min_dt = min(min_dt, dt_sub)

        policy[0] = self.policy_from(self.operator_values(V, self.coefficients(float(self.t_nodes[0]))))

        if not np.all(np.isfinite(values)):
            raise SimulationError("value grid became non-finite", {"rho": spec.rho, "epsilon": spec.epsilon})
        if inflated:
            logger.warning(f"Cross-derivative splitting inflated at {inflated} node-control-intervals "
                           f"(max inflation {max_inflation:.3g})")
        diagnostics = {
            "substeps": total_substeps,
            "min_substep": min_dt if math.isfinite(min_dt) else 0.0,
            "inflated_nodes": inflated,
            "max_inflation": max_inflation,
            # edge and corner nodes where the rectangular boundary is not smooth
            "corner_nodes": int(self._corner_nodes()),
        }
        logger.info(f"Solved rho={spec.rho} epsilon={spec.epsilon:.4g} on {spec.shape}: "
                    f"{total_substeps} substeps")
        return ValueGrid(spec=spec, params=self.params, values=values, policy_index=policy,
                         diagnostics=diagnostics)

    def _corner_nodes(self) -> int:
        counts = [np.isin(np.arange(n), (0, n - 1)) for n in (self.spec.nP, self.spec.nXi, self.spec.nTheta)]
        on_faces = sum(np.meshgrid(*counts, indexing="ij"))
        return np.count_nonzero(on_faces >= 2)


def solve_regularized(params: ModelParams, spec: GridSpec) -> ValueGrid:
    """Solve the regularized truncated HJB problem backward from the terminal slice."""
    return HjbSolver(params, spec).solve()


# ---------------------------------------------------------------------------
# Vanishing-viscosity / truncation ladder
# ---------------------------------------------------------------------------

@dataclass
class LadderRow:
    stage: str
    rho: float
    n: int
    epsilon: float
    difference: float


@dataclass
class LadderReport:
    """Cauchy differences of the double limit"""
    tol: float
    epsilon0: float
    rho_schedule: List[float]
    rows: List[LadderRow] = field(default_factory=list)
    converged: bool = False
    final_rho: float = math.nan
    final_epsilon: float = math.nan
    monotone_in_n: Dict[str, bool] = field(default_factory=dict)
    rho_differences: List[float] = field(default_factory=list)

    @property
    def monotone_in_rho(self) -> bool:
        """Successive rho-stage differences never grow."""
        d = self.rho_differences
        return all(b <= a for a, b in zip(d, d[1:]))

    @property
    def scheme_tolerance(self) -> float:
        """Last finite Cauchy difference, 0 when none was computed."""
        finite = [r.difference for r in self.rows if math.isfinite(r.difference)]
        return finite[-1] if finite else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "converged": self.converged,
            "tol": self.tol if math.isfinite(self.tol) else "inf",
            "epsilon0": self.epsilon0,
            "rho_schedule": self.rho_schedule,
            "final_rho": self.final_rho,
            "final_epsilon": self.final_epsilon,
            "scheme_tolerance": self.scheme_tolerance,
            "monotone_in_n": self.monotone_in_n,
            "monotone_in_rho": self.monotone_in_rho,
            "rho_differences": self.rho_differences,
            "rows": [{**vars(r), "difference": r.difference if math.isfinite(r.difference) else None}
                     for r in self.rows],
        }


def grid_difference_on(reference: ValueGrid, first: ValueGrid, second: ValueGrid) -> float:
    """Max-norm difference of two grids evaluated at the nodes of a reference grid."""
    if first.spec.nT != second.spec.nT or first.params != second.params:
        raise GridMismatchError("grids differ in time nodes or model parameters")
    t, P, xi, theta = np.meshgrid(*reference.axes, indexing="ij")
    first_values, _ = first.interpolate(t, P, xi, theta)
    second_values, _ = second.interpolate(t, P, xi, theta)
    return float(np.max(np.abs(first_values - second_values)))


def solve_ladder(params: ModelParams, base_spec: GridSpec, epsilon0: float, n_max: int,
                 rho_schedule: Sequence[float], tol: float) -> Tuple[ValueGrid, LadderReport]:
    """
    Drive epsilon = epsilon0^n to zero for each truncation radius, then grow rho.

    For each rho the reference solve uses epsilon0^0 = 1. Successive epsilon
    solutions are compared in max norm; a rho stage converges once the
    difference is at most tol. Successive rho solutions are compared on the
    nodes of the smallest region. tol = inf performs a single solve.

    Returns:
        (final grid, LadderReport); non-convergence sets converged = False
    """
    if not 0.0 < epsilon0 < 1.0:
        raise ModelValidationError(f"epsilon0 must lie in (0, 1), got {epsilon0}")
    if n_max < 1:
        raise ModelValidationError(f"n_max must be at least 1, got {n_max}")
    schedule = [float(r) for r in rho_schedule]
    if not schedule or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ModelValidationError("rho_schedule must be a nonempty increasing sequence")
    report = LadderReport(tol=tol, epsilon0=epsilon0, rho_schedule=schedule)

    if math.isinf(tol):
        spec = base_spec.model_copy(update={"rho": schedule[0], "epsilon": epsilon0})
        grid = solve_regularized(params, spec)
        report.rows.append(LadderRow("epsilon", schedule[0], 1, epsilon0, math.nan))
        report.converged, report.final_rho, report.final_epsilon = True, schedule[0], epsilon0
        return grid, report

    smallest: Optional[ValueGrid] = None
    previous_rho_grid: Optional[ValueGrid] = None
    grid: Optional[ValueGrid] = None
    for rho in schedule:
        previous = solve_regularized(params, base_spec.model_copy(update={"rho": rho, "epsilon": 1.0}))
        stage_converged = False
        differences = []
        for n in range(1, n_max + 1):
            epsilon = epsilon0 ** n
            grid = solve_regularized(params, base_spec.model_copy(update={"rho": rho, "epsilon": epsilon}))
            difference = float(np.max(np.abs(grid.values - previous.values)))
            differences.append(difference)
            report.rows.append(LadderRow("epsilon", rho, n, epsilon, difference))
            logger.debug(f"Ladder rho={rho} n={n} epsilon={epsilon:.4g}: difference {difference:.4g}")
            previous = grid
            if difference <= tol:
                stage_converged = True
                break
        report.monotone_in_n[str(rho)] = all(b <= a for a, b in zip(differences, differences[1:]))
        report.final_rho, report.final_epsilon = rho, grid.spec.epsilon
        if not stage_converged:
            logger.warning(f"Ladder did not converge in epsilon for rho={rho} within {n_max} levels")
            return grid, report

        if smallest is None:
            smallest = grid
        if previous_rho_grid is not None:
            difference = grid_difference_on(smallest, previous_rho_grid, grid)
            report.rows.append(LadderRow("rho", rho, 0, grid.spec.epsilon, difference))
            report.rho_differences.append(difference)
            if difference <= tol:
                report.converged = True
                break
        elif len(schedule) == 1:
            report.converged = True
        previous_rho_grid = grid

    if not report.monotone_in_rho:
        logger.warning(f"Ladder rho-stage differences are not decreasing: {report.rho_differences}")
    status = "converged" if report.converged else "did not converge"
    logger.info(f"Ladder {status}: rho={report.final_rho}, epsilon={report.final_epsilon:.4g}")
    return grid, report


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

class GreedyPolicy:
    """Nearest-node lookup of the controls stored during the sweep"""

    def __init__(self, params: ModelParams, grid: ValueGrid):
        self.params = params
        self.grid = grid
        self.axes = grid.axes
        self.eta, self.c = grid.spec.control_grid.flat_controls()
        self.extrapolated = 0

    def node_indices(self, t: Any, x: State) -> Tuple[Tuple[np.ndarray, ...], np.ndarray]:
        queries = np.broadcast_arrays(*(np.asarray(q, dtype=float) for q in (t, x.P, x.xi, x.theta)))
        outside = np.zeros(queries[0].shape, dtype=bool)
        index = []
        for nodes, q in zip(self.axes, queries):
            span = nodes[-1] - nodes[0]
            outside |= (q < nodes[0] - 1e-12 * span) | (q > nodes[-1] + 1e-12 * span)
            step = nodes[1] - nodes[0]
            index.append(np.clip(np.rint((q - nodes[0]) / step).astype(int), 0, len(nodes) - 1))
        return tuple(index), outside

    def indices(self, t: Any, x: State) -> np.ndarray:
        """Flat control index per query; u0 (index 0) outside the grid hull."""
        index, outside = self.node_indices(t, x)
        chosen = np.where(outside, 0, self.grid.policy_index[index])
        n_out = int(np.count_nonzero(outside))
        if n_out:
            self.extrapolated += n_out
            logger.warning(f"{n_out} policy queries outside the grid hull got the default control")
        return chosen

    def __call__(self, t: Any, x: State) -> Control:
        chosen = self.indices(t, x)
        if chosen.ndim == 0:
            return Control(float(self.eta[chosen]), float(self.c[chosen]))
        return Control(self.eta[chosen], self.c[chosen])

    def rows(self):
        """(t, P, xi, theta, eta, c) for every node, C order."""
        t, P, xi, theta = self.axes
        for index in np.ndindex(*self.grid.policy_index.shape):
            k = int(self.grid.policy_index[index])
            yield (float(t[index[0]]), float(P[index[1]]), float(xi[index[2]]), float(theta[index[3]]),
                   float(self.eta[k]), float(self.c[k]))


def extract_policy(params: ModelParams, grid: ValueGrid) -> GreedyPolicy:
    """Greedy Markov policy of a solved grid."""
    return GreedyPolicy(params, grid)


def interpolate_value(grid: ValueGrid, t: float, x: State) -> float:
    """Linear in t and trilinear in space; exact at nodes, clamped outside the hull."""
    value, outside = grid.interpolate(t, x.P, x.xi, x.theta)
    if np.any(outside):
        logger.warning(f"Value query at t={t}, {x.to_dict()} is outside the grid hull; clamped")
    return float(value)


def _balanced_factors(K0: int) -> Tuple[int, int, int]:
    """Split K0 into three factors with the smallest largest factor."""
    best = (K0, 1, 1)
    for a in range(1, K0 + 1):
        if K0 % a:
            continue
        for b in range(1, K0 // a + 1):
            if (K0 // a) % b:
                continue
            candidate = tuple(sorted((a, b, K0 // a // b), reverse=True))
            if max(candidate) < max(best) or (max(candidate) == max(best) and candidate < best):
                best = candidate
    return best


CELL_TABLE_TAG = "policy_table "


@dataclass
class PolicyTable:
    """
    Discrete Markov policy: slabs of [s, T - delta] times boxes of the shrunken
    truncated region, one grid control per pair, default control elsewhere.
    """
    s: float
    T: float
    delta: float
    slab_edges: np.ndarray
    P_edges: np.ndarray
    xi_edges: np.ndarray
    theta_edges: np.ndarray
    eta: np.ndarray       # (M, K0)
    c: np.ndarray         # (M, K0)
    residual: np.ndarray  # (M, K0)
    fallback: np.ndarray  # (M, K0) bool
    default_control: Control = DEFAULT_CONTROL

    @property
    def M(self) -> int:
        return len(self.slab_edges) - 1

    @property
    def K0(self) -> int:
        return (len(self.P_edges) - 1) * (len(self.xi_edges) - 1) * (len(self.theta_edges) - 1)

    @property
    def slab_width(self) -> float:
        return float(self.slab_edges[1] - self.slab_edges[0])

    @property
    def max_cell_diameter(self) -> float:
        return float(math.sqrt(sum((e[1] - e[0]) ** 2 for e in (self.P_edges, self.xi_edges, self.theta_edges))))

    @property
    def fallback_fraction(self) -> float:
        """Share of (slab, cell) pairs that carry the default control."""
        return float(np.count_nonzero(self.fallback)) / self.fallback.size if self.fallback.size else 0.0

    def slab_index(self, t: float) -> int:
        if t < self.slab_edges[0] or t >= self.slab_edges[-1]:
            return -1
        return int(min(np.searchsorted(self.slab_edges, t, side="right") - 1, self.M - 1))

    def cell_index(self, x: State) -> np.ndarray:
        """Flat cell index (P-major) per state, -1 outside the covered region."""
        index, outside = [], None
        for edges, q in zip((self.P_edges, self.xi_edges, self.theta_edges), (x.P, x.xi, x.theta)):
            q = np.asarray(q, dtype=float)
            miss = (q < edges[0]) | (q > edges[-1])
            outside = miss if outside is None else outside | miss
            index.append(np.clip(np.searchsorted(edges, q, side="right") - 1, 0, len(edges) - 2))
        n_xi, n_theta = len(self.xi_edges) - 1, len(self.theta_edges) - 1
        flat = (index[0] * n_xi + index[1]) * n_theta + index[2]
        return np.where(outside, -1, flat)

    def cell_controls(self, slab: int, x: State) -> Control:
        cells = self.cell_index(x)
        if slab < 0:
            return Control(np.full(cells.shape, float(self.default_control.eta)),
                           np.full(cells.shape, float(self.default_control.c)))
        inside = cells >= 0
        safe = np.where(inside, cells, 0)
        return Control(np.where(inside, self.eta[slab, safe], float(self.default_control.eta)),
                       np.where(inside, self.c[slab, safe], float(self.default_control.c)))

    def control_at(self, t: float, x: State) -> Control:
        u = self.cell_controls(self.slab_index(t), x)
        return Control(float(u.eta), float(u.c))

    def geometry(self) -> Dict[str, Any]:
        return {"s": self.s, "T": self.T, "delta": self.delta, "M": self.M, "K0": self.K0,
                "slab_edges": self.slab_edges.tolist(), "P_edges": self.P_edges.tolist(),
                "xi_edges": self.xi_edges.tolist(), "theta_edges": self.theta_edges.tolist(),
                "default_control": self.default_control.to_dict(),
                "slab_width": self.slab_width, "max_cell_diameter": self.max_cell_diameter,
                "fallback_cells": int(np.count_nonzero(self.fallback)),
                "fallback_fraction": self.fallback_fraction}

    def save(self, path: Path, preamble: Optional[List[str]] = None) -> bool:
        """CSV with (slab, cell bounds, eta, c, residual); geometry in a tagged comment line."""
        n_xi, n_theta = len(self.xi_edges) - 1, len(self.theta_edges) - 1

        def rows():
            for i in range(self.M):
                for cell in range(self.K0):
                    ip, rest = divmod(cell, n_xi * n_theta)
                    ix, ih = divmod(rest, n_theta)
                    yield (i, float(self.slab_edges[i]), float(self.slab_edges[i + 1]), cell,
                           float(self.P_edges[ip]), float(self.P_edges[ip + 1]),
                           float(self.xi_edges[ix]), float(self.xi_edges[ix + 1]),
                           float(self.theta_edges[ih]), float(self.theta_edges[ih + 1]),
                           float(self.eta[i, cell]), float(self.c[i, cell]),
                           float(self.residual[i, cell]), int(self.fallback[i, cell]))

        lines = list(preamble or []) + [CELL_TABLE_TAG + json.dumps(self.geometry(), sort_keys=True)]
        return write_csv_file(path,
                              ["slab", "t_start", "t_end", "cell", "P_lo", "P_hi", "xi_lo", "xi_hi",
                               "theta_lo", "theta_hi", "eta", "c", "residual", "fallback"],
                              rows(), preamble=lines)

    @classmethod
    def load(cls, path: Path) -> "PolicyTable":
        path = Path(path)
        if not file_exists(path):
            raise MissingArtifactError(f"policy table {path} does not exist")
        geometry = None
        for line in read_text_file(path).splitlines():
            if line.startswith("# " + CELL_TABLE_TAG):
                geometry = json.loads(line[len("# " + CELL_TABLE_TAG):])
        if geometry is None:
            raise MissingArtifactError(f"{path} has no policy table geometry line")
        M, K0 = geometry["M"], geometry["K0"]
        eta, c = np.zeros((M, K0)), np.zeros((M, K0))
        residual, fallback = np.zeros((M, K0)), np.zeros((M, K0), dtype=bool)
        for row in read_csv_file(path):
            i, cell = int(row["slab"]), int(row["cell"])
            eta[i, cell], c[i, cell] = float(row["eta"]), float(row["c"])
            residual[i, cell], fallback[i, cell] = float(row["residual"]), bool(int(row["fallback"]))
        default = geometry["default_control"]
        return cls(s=geometry["s"], T=geometry["T"], delta=geometry["delta"],
                   slab_edges=np.array(geometry["slab_edges"]), P_edges=np.array(geometry["P_edges"]),
                   xi_edges=np.array(geometry["xi_edges"]), theta_edges=np.array(geometry["theta_edges"]),
                   eta=eta, c=c, residual=residual, fallback=fallback,
                   default_control=Control(default["eta"], default["c"]))


def synthesize_discrete_policy(params: ModelParams, grid: ValueGrid, M: int, K0: int, delta: float,
                               eps_target: float, s: float = 0.0) -> PolicyTable:
    """
    Build the discrete Markov policy of the value grid.

    [s, T - delta] is cut into M slabs and the region [R, rho - delta] x
    [1/(rho - delta), rho - delta] x [-H, H] into K0 boxes. For every
    (slab, box) the box centre and slab start are snapped to the nearest
    interior node and time slice, and the control minimizing the forward
    time difference plus A^u W + L is chosen there. A cell whose best residual
    exceeds eps_target / (4T) falls back to the default control.
    """
    rho = grid.spec.rho
    if M < 1 or K0 < 1:
        raise ModelValidationError(f"M and K0 must be positive, got M={M}, K0={K0}")
    if delta <= 0 or rho - delta <= max(params.R, 1.0):
        raise ModelValidationError(f"delta={delta} must be positive with rho - delta > max(R, 1)")
    if not 0.0 <= s < params.T - delta:
        raise ModelValidationError(f"start time s={s} must lie in [0, T - delta)")
    if eps_target <= 0:
        raise ModelValidationError(f"eps_target must be positive, got {eps_target}")

    solver = HjbSolver(params, grid.spec)
    n_P, n_xi, n_theta = _balanced_factors(K0)
    slab_edges = np.linspace(s, params.T - delta, M + 1)
    P_edges = np.linspace(params.R, rho - delta, n_P + 1)
    xi_edges = np.linspace(1.0 / (rho - delta), rho - delta, n_xi + 1)
    theta_edges = np.linspace(-params.H, params.H, n_theta + 1)

    centres = np.meshgrid(0.5 * (P_edges[:-1] + P_edges[1:]), 0.5 * (xi_edges[:-1] + xi_edges[1:]),
                          0.5 * (theta_edges[:-1] + theta_edges[1:]), indexing="ij")
    node_index = []
    for nodes, centre in zip((solver.P_nodes, solver.xi_nodes, solver.theta_nodes), centres):
        step = nodes[1] - nodes[0]
        # interior index, counted from the first interior node
        node_index.append(np.clip(np.rint((centre.ravel() - nodes[0]) / step).astype(int), 1, len(nodes) - 2) - 1)
    n_xi_int, n_theta_int = solver.interior_shape[1], solver.interior_shape[2]
    sites = (node_index[0] * n_xi_int + node_index[1]) * n_theta_int + node_index[2]

    eta_levels, c_levels = grid.spec.control_grid.flat_controls()
    eta, c = np.zeros((M, K0)), np.zeros((M, K0))
    residual, fallback = np.zeros((M, K0)), np.zeros((M, K0), dtype=bool)
    threshold = eps_target / (4.0 * params.T)
    t_nodes = solver.t_nodes
    cache: Dict[int, np.ndarray] = {}
    for i in range(M):
        k = int(np.clip(np.rint(slab_edges[i] / (t_nodes[1] - t_nodes[0])), 0, len(t_nodes) - 2))
        if k not in cache:
            dt = t_nodes[k + 1] - t_nodes[k]
            time_difference = ((grid.values[k + 1] - grid.values[k])[1:-1, 1:-1, 1:-1].ravel()) / dt
            cache[k] = solver.operator_values(grid.values[k], solver.coefficients(float(t_nodes[k]))) \
                + time_difference[None, :]
        G = cache[k][:, sites]
        best = np.min(G, axis=0)
        choice = np.argmax(G <= best + TIE_RTOL * np.maximum(1.0, np.abs(best)), axis=0)
        residual[i] = best
        fallback[i] = best > threshold
        eta[i] = np.where(fallback[i], float(DEFAULT_CONTROL.eta), eta_levels[choice])
        c[i] = np.where(fallback[i], float(DEFAULT_CONTROL.c), c_levels[choice])

    table = PolicyTable(s=s, T=params.T, delta=delta, slab_edges=slab_edges, P_edges=P_edges,
                        xi_edges=xi_edges, theta_edges=theta_edges, eta=eta, c=c,
                        residual=residual, fallback=fallback)
    n_fallback = int(np.count_nonzero(fallback))
    if n_fallback:
        logger.warning(f"{n_fallback} of {M * K0} policy cells ({table.fallback_fraction:.1%}) exceed the "
                       f"residual target {threshold:.3g} and use the default control")
    logger.info(f"Policy table: {M} slabs x {K0} cells, max cell diameter {table.max_cell_diameter:.4g}, "
                f"default-control fraction {table.fallback_fraction:.1%}")
    return table


# ---------------------------------------------------------------------------
# Bound audit
# ---------------------------------------------------------------------------

@dataclass
class BoundAudit:
    derived_K: float
    checked_nodes: int
    violations: int
    worst_ratio: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict[str, Any]:
        return {**vars(self), "passed": self.passed}


def audit_value_bound(params: ModelParams, grid: ValueGrid) -> BoundAudit:
    """Check |V| against the uniform cost bound at every node."""
    K = derived_K(params)
    # the bound is xi (b0 + b1 P^2)
    b0 = cost_growth_bound(params, State(0.0, 1.0, 0.0), K)
    b1 = cost_growth_bound(params, State(1.0, 1.0, 0.0), K) - b0
    _, P, xi, _ = np.meshgrid(*grid.axes, indexing="ij")
    bound = xi * (b0 + b1 * P ** 2)
    ratio = np.abs(grid.values) / np.where(bound > 0, bound, np.inf)
    violations = int(np.count_nonzero(np.abs(grid.values) > bound))
    return BoundAudit(derived_K=K, checked_nodes=int(grid.values.size), violations=violations,
                      worst_ratio=float(np.max(ratio)))

"""
Controlled state simulation, exit detection and Monte Carlo estimators.

Every path i owns a counter-based random stream keyed by (seed, i), so the
result of a path never depends on how many other paths are simulated or on
which worker simulated it.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config.constants import TAIL_LEVEL_FACTOR
from config.settings import MC_CHUNK_SIZE, MC_SE_SLACK, ROUNDOFF_RTOL
from modules.model import (
    Control,
    ModelParams,
    State,
    drift_vector,
    running_cost,
    vol_vector,
    xi_exposure,
)
from utils.errors import ModelValidationError, SimulationError, TailBoundError
from utils.logger import setup_logger
from utils.parallel import WorkerPool

logger = setup_logger(__name__)

UINT64_MAX = 2 ** 64 - 1
NORMAL_BLOCK_STEPS = 256
TRACE_COLUMNS = ("t", "P", "xi", "theta", "eta", "c")


class SimConfig(BaseModel):
    """Monte Carlo settings. rho_trunc = None simulates in the untruncated space."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    dt: float = Field(1e-2, gt=0)
    n_paths: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0, le=UINT64_MAX)
    rho_trunc: Optional[float] = Field(None, gt=0)
    exact_xi_update: bool = True

    def validate_for(self, params: ModelParams) -> "SimConfig":
        if self.dt > params.T:
            raise ModelValidationError(f"dt={self.dt} exceeds the horizon T={params.T}")
        if self.rho_trunc is not None and self.rho_trunc <= params.R:
            raise ModelValidationError(f"rho_trunc={self.rho_trunc} must exceed R={params.R}")
        return self


class ExitFace(str, Enum):
    PAYOFF_FLOOR = "payoff_floor"
    PAYOFF_CAP = "payoff_cap"
    XI_FLOOR = "xi_floor"
    XI_CAP = "xi_cap"
    THETA_BAND = "theta_band"
    HORIZON = "horizon"


# integer codes used inside the vectorized engine, in detection priority order
_FACE_CODES = [ExitFace.PAYOFF_FLOOR, ExitFace.PAYOFF_CAP, ExitFace.XI_FLOOR,
               ExitFace.XI_CAP, ExitFace.THETA_BAND, ExitFace.HORIZON]
_RUNNING = -1
_STOPPED = -2


@dataclass
class PathResult:
    """One simulated path stopped at its exit time"""
    exit_time: float
    exit_state: State
    cost: float
    exit_face: ExitFace
    trace: Optional[List[Tuple[float, ...]]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"exit_time": self.exit_time, "exit_state": self.exit_state.to_dict(),
                "cost": self.cost, "exit_face": self.exit_face.value}


@dataclass
class McEstimate:
    """Sample mean with its standard error"""
    mean: float
    std_error: float
    n: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "McEstimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        mean = float(np.sum(samples) / n)
        std_error = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean=mean, std_error=std_error, n=n)

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "std_error": self.std_error, "n": self.n}


@runtime_checkable
class SampledPolicy(Protocol):
    """
    Discrete-time policy executed by sample and hold: the control chosen at the
    start of a slab from the state observed there is kept until the slab ends.
    """

    def slab_index(self, t: float) -> int:
        """Slab containing t, or -1 where the default control applies."""
        ...

    def cell_controls(self, slab: int, x: State) -> Control:
        """Vectorized lookup of the slab's control at states x."""
        ...


PolicySource = Union[Control, Callable[[float, State], Control], SampledPolicy]


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    """Independent Philox stream of path path_index under seed."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, path_index], dtype=np.uint64)))


class _NormalBlocks:
    """Standard normal draws of shape (n_paths, 4) per step, read from per-path streams in blocks."""

    def __init__(self, seed: int, path_indices: np.ndarray, n_steps: int):
        self.streams = [path_stream(seed, int(i)) for i in path_indices]
        self.n_steps = n_steps
        self.block: Optional[np.ndarray] = None
        self.block_start = 0

    def step(self, k: int) -> np.ndarray:
        if self.block is None or k >= self.block_start + self.block.shape[1]:
            size = min(NORMAL_BLOCK_STEPS, self.n_steps - k)
            self.block = np.stack([g.standard_normal((size, 4)) for g in self.streams])
            self.block_start = k
        return self.block[:, k - self.block_start, :]


def _time_mesh(s: float, T: float, dt: float, extra: Sequence[float] = ()) -> np.ndarray:
    n = max(1, int(math.ceil((T - s) / dt - 1e-9)))
    mesh = s + dt * np.arange(n)
    mesh = mesh[mesh < T - 1e-12 * max(1.0, T)]
    points = [mesh, [T]] + [[p] for p in extra if s <= p <= T]
    return np.unique(np.concatenate(points))


def step_euler(params: ModelParams, t: float, x: State, u: Control, dw: Any, dw1: Any,
               epsilon: float, dt: float, exact_xi_update: bool = False) -> State:
    """
    One Euler-Maruyama step x' = x + f dt + sigma dw + epsilon dw1.

    All three components share the scalar increment dw; dw1 has three
    components on its first axis. With exact_xi_update and epsilon = 0 the
    density uses xi' = xi exp(-h dw - h^2 dt / 2), which keeps xi > 0.

    Raises:
        SimulationError: if the new state is not finite
    """
    if dt <= 0:
        raise ModelValidationError(f"dt must be positive, got {dt}")
    f = drift_vector(params, t, x, u)
    sig = vol_vector(params, t, x, u)
    dw = np.asarray(dw, dtype=float)
    dw1 = np.asarray(dw1, dtype=float)
    new = np.asarray(x.as_array(), dtype=float) + f * dt + sig * dw
    if epsilon > 0:
        new = new + epsilon * dw1
    if exact_xi_update and epsilon == 0:
        h = xi_exposure(params, t, x, u)
        new[1] = np.asarray(x.xi, dtype=float) * np.exp(-h * dw - 0.5 * h ** 2 * dt)

    bad = ~np.isfinite(new)
    if bad.any():
        flat = np.argwhere(bad.reshape(3, -1))[0][1]
        coefficients = {
            "t": float(t),
            "drift": np.broadcast_to(f, new.shape).reshape(3, -1)[:, flat].tolist(),
            "volatility": np.broadcast_to(sig, new.shape).reshape(3, -1)[:, flat].tolist(),
        }
        raise SimulationError(f"non-finite state after Euler step at t={t}", coefficients)

    if new.ndim == 1:
        return State(float(new[0]), float(new[1]), float(new[2]))
    return State(new[0], new[1], new[2])


def _exit_codes(params: ModelParams, rho: Optional[float], x: State) -> np.ndarray:
    """Face code of the first violated face, _RUNNING where still inside the closed region."""
    P, xi, theta = (np.asarray(v, dtype=float) for v in (x.P, x.xi, x.theta))
    codes = np.full(P.shape, _RUNNING)
    xi_floor = 0.0 if rho is None else 1.0 / rho
    tests = [P < params.R,
             (P > rho) if rho is not None else np.zeros(P.shape, dtype=bool),
             xi < xi_floor,
             (xi > rho) if rho is not None else np.zeros(P.shape, dtype=bool),
             np.abs(theta) > params.H]
    for code in reversed(range(len(tests))):
        codes = np.where(tests[code], code, codes)
    return codes


def _policy_controls(policy: PolicySource, t: float, x: State, n: int,
                     held: Optional[Tuple[int, Control]]) -> Tuple[Control, Optional[Tuple[int, Control]]]:
    if isinstance(policy, Control):
        return policy, held
    if isinstance(policy, SampledPolicy):
        slab = policy.slab_index(t)
        if held is None or held[0] != slab:
            held = (slab, policy.cell_controls(slab, x))
        return held[1], held
    u = policy(t, x)
    return Control(np.broadcast_to(np.asarray(u.eta, dtype=float), (n,)),
                   np.broadcast_to(np.asarray(u.c, dtype=float), (n,))), held


@dataclass
class _Batch:
    stop_time: np.ndarray
    P: np.ndarray
    xi: np.ndarray
    theta: np.ndarray
    running: np.ndarray
    face: np.ndarray
    snapshots: Optional[np.ndarray] = None
    trace: Optional[List[Tuple[float, ...]]] = None

    @property
    def cost(self) -> np.ndarray:
        return self.running - self.P * self.xi

    @property
    def exited(self) -> np.ndarray:
        return self.face >= 0


def _simulate_batch(params: ModelParams, config: SimConfig, s: float, y: State, policy: PolicySource,
                    epsilon: float, path_indices: np.ndarray, stop_time: Optional[float] = None,
                    stop_radius: Optional[float] = None, detect_exit: bool = True,
                    snapshot_times: Sequence[float] = (), record_trace: bool = False,
                    rho_override: Optional[float] = None) -> _Batch:
    """
    Simulate the paths path_indices from (s, y) until exit, the stop time,
    leaving the ball of radius stop_radius around y, or T.

    Paths stopped by the stop rules (not by an exit) carry face _STOPPED; paths
    reaching T carry HORIZON.
    """
    rho = config.rho_trunc if rho_override is None else rho_override
    n = len(path_indices)
    mesh = _time_mesh(s, params.T, config.dt, list(snapshot_times)
                      + ([stop_time] if stop_time is not None else []))
    n_steps = len(mesh) - 1
    normals = _NormalBlocks(config.seed, path_indices, n_steps)

    P = np.full(n, float(y.P))
    xi = np.full(n, float(y.xi))
    theta = np.full(n, float(y.theta))
    running = np.zeros(n)
    stop = np.full(n, float(params.T))
    face = np.full(n, _RUNNING)
    active = np.ones(n, dtype=bool)
    snapshots = np.full((n, len(snapshot_times)), float(y.xi)) if snapshot_times else None
    snapshot_index = {float(t_s): j for j, t_s in enumerate(snapshot_times)}
    trace: Optional[List[Tuple[float, ...]]] = [] if record_trace else None
    held = None

    if stop_time is not None and stop_time <= s:
        face[:] = _STOPPED
        stop[:] = s
        return _Batch(stop, P, xi, theta, running, face, snapshots, trace)

    for k in range(n_steps):
        t, t_next = float(mesh[k]), float(mesh[k + 1])
        step = t_next - t
        x = State(P, xi, theta)
        u, held = _policy_controls(policy, t, x, n, held)
        eta = np.broadcast_to(np.asarray(u.eta, dtype=float), (n,))
        c = np.broadcast_to(np.asarray(u.c, dtype=float), (n,))
        u = Control(eta, c)
        if trace is not None:
            trace.append((t, float(P[0]), float(xi[0]), float(theta[0]), float(eta[0]), float(c[0])))

        draws = normals.step(k) * math.sqrt(step)
        cost_rate = running_cost(params, x, u)
        new = step_euler(params, t, x, u, draws[:, 0], draws[:, 1:].T, epsilon, step,
                         config.exact_xi_update)

        # left-endpoint quadrature, only on paths still running
        running = np.where(active, running + cost_rate * step, running)
        P = np.where(active, new.P, P)
        xi = np.where(active, new.xi, xi)
        theta = np.where(active, new.theta, theta)

        if t_next in snapshot_index:
            snapshots[:, snapshot_index[t_next]] = xi

        newly = np.zeros(n, dtype=bool)
        if detect_exit:
            codes = _exit_codes(params, rho, State(P, xi, theta))
            newly = active & (codes >= 0)
            face = np.where(newly, codes, face)
        if stop_radius is not None:
            distance = np.sqrt((P - float(y.P)) ** 2 + (xi - float(y.xi)) ** 2
                               + (theta - float(y.theta)) ** 2)
            left_ball = active & ~newly & (distance > stop_radius)
            face = np.where(left_ball, _STOPPED, face)
            newly |= left_ball
        if stop_time is not None and t_next >= stop_time:
            reached = active & ~newly
            face = np.where(reached, _STOPPED, face)
            newly |= reached
        stop = np.where(newly, t_next, stop)
        active &= ~newly
        if not active.any() and not snapshot_times:
            break

    face = np.where(active, _FACE_CODES.index(ExitFace.HORIZON), face)
    if trace is not None:
        trace.append((float(stop[0]), float(P[0]), float(xi[0]), float(theta[0]), math.nan, math.nan))
    return _Batch(stop, P, xi, theta, running, face, snapshots, trace)


def _check_start(params: ModelParams, config: SimConfig, s: float, y: State):
    if not 0.0 <= s <= params.T:
        raise ModelValidationError(f"start time s={s} outside [0, T={params.T}]")
    codes = _exit_codes(params, config.rho_trunc, y)
    if int(codes) >= 0:
        raise ModelValidationError(f"start state {y.to_dict()} is outside the state space "
                                   f"({_FACE_CODES[int(codes)].value})")


def _chunks(n_paths: int) -> List[np.ndarray]:
    return [np.arange(start, min(start + MC_CHUNK_SIZE, n_paths), dtype=np.uint64)
            for start in range(0, n_paths, MC_CHUNK_SIZE)]


def simulate_path(params: ModelParams, config: SimConfig, s: float, y: State, policy: PolicySource,
                  epsilon: float = 0.0, path_index: int = 0, record_trace: bool = False) -> PathResult:
    """
    Simulate one path from (s, y) until it leaves the closed state space or reaches T.

    Args:
        params: Model parameters
        config: Simulation settings (dt, seed, truncation)
        s: Start time
        y: Start state, inside the (truncated) closed state space
        policy: Constant Control, Markov function (t, State) -> Control, or a sampled policy
        epsilon: Regularization noise scale
        path_index: Which stream of config.seed drives the path
        record_trace: Keep the per-step (t, P, xi, theta, eta, c) rows

    Returns:
        PathResult with cost = sum of L dt - P(tau) xi(tau)
    """
    config.validate_for(params)
    _check_start(params, config, s, y)
    batch = _simulate_batch(params, config, s, y, policy, epsilon,
                            np.array([path_index], dtype=np.uint64), record_trace=record_trace)
    return PathResult(
        exit_time=float(batch.stop_time[0]),
        exit_state=State(float(batch.P[0]), float(batch.xi[0]), float(batch.theta[0])),
        cost=float(batch.cost[0]),
        exit_face=_FACE_CODES[int(batch.face[0])],
        trace=batch.trace,
    )


def simulate_costs(params: ModelParams, config: SimConfig, s: float, y: State, policy: PolicySource,
                   epsilon: float = 0.0, pool: Optional[WorkerPool] = None, **stop_rules: Any) -> _Batch:
    """Simulate all config.n_paths paths in chunks and concatenate them in path order."""
    config.validate_for(params)
    _check_start(params, config, s, y)
    pool = pool or WorkerPool()
    batches = pool.map(lambda ids: _simulate_batch(params, config, s, y, policy, epsilon, ids, **stop_rules),
                       _chunks(config.n_paths), label="mc_chunk")
    return _Batch(*(np.concatenate([getattr(b, name) for b in batches])
                    for name in ("stop_time", "P", "xi", "theta", "running", "face")),
                  snapshots=(np.concatenate([b.snapshots for b in batches])
                             if batches[0].snapshots is not None else None))


def estimate_cost(params: ModelParams, config: SimConfig, s: float, y: State, policy: PolicySource,
                  epsilon: float = 0.0, pool: Optional[WorkerPool] = None) -> McEstimate:
    """Monte Carlo estimate of J(s, y, policy) over config.n_paths independent paths."""
    batch = simulate_costs(params, config, s, y, policy, epsilon, pool)
    estimate = McEstimate.from_samples(batch.cost)
    logger.info(f"Cost estimate from s={s}: {estimate.mean:.6g} +/- {estimate.std_error:.3g} "
                f"({estimate.n} paths)")
    return estimate


# ---------------------------------------------------------------------------
# Martingale check
# ---------------------------------------------------------------------------

MARTINGALE_FRACTIONS = (0.25, 0.5, 1.0)


@dataclass
class MartingaleRow:
    t: float
    mean: float
    std_error: float
    passed: bool


@dataclass
class MartingaleReport:
    xi0: float
    rows: List[MartingaleRow] = field(default_factory=list)
    min_xi: float = math.nan
    positive: bool = True

    @property
    def passed(self) -> bool:
        return self.positive and all(r.passed for r in self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "xi0": self.xi0, "min_xi": self.min_xi,
                "positive": self.positive, "rows": [vars(r) for r in self.rows]}


def check_xi_martingale(params: ModelParams, config: SimConfig, s: float, y: State,
                        policy: PolicySource, pool: Optional[WorkerPool] = None) -> MartingaleReport:
    """
    Check E[xi(t)] = xi(s) at t = s + {1/4, 1/2, 1} (T - s) with exact updates.

    The density is followed without stopping at the boundary: it is a
    martingale on the whole horizon whatever the other coordinates do.
    """
    if y.xi < 0:
        raise ModelValidationError(f"xi0 must be nonnegative, got {y.xi}")
    free = config.model_copy(update={"exact_xi_update": True, "rho_trunc": None})
    times = [s + f * (params.T - s) for f in MARTINGALE_FRACTIONS]
    batch = simulate_costs(params, free, s, y, policy, 0.0, pool,
                           detect_exit=False, snapshot_times=times)
    xi0 = float(y.xi)
    report = MartingaleReport(xi0=xi0, min_xi=float(np.min(batch.snapshots)))
    for j, t in enumerate(times):
        estimate = McEstimate.from_samples(batch.snapshots[:, j])
        gap = abs(estimate.mean - xi0)
        # round-off floor: with zero exposure every sample equals xi0 up to a few ulps
        ok = gap <= MC_SE_SLACK * estimate.std_error + ROUNDOFF_RTOL * max(1.0, xi0)
        report.rows.append(MartingaleRow(t=t, mean=estimate.mean, std_error=estimate.std_error, passed=ok))
    if xi0 > 0:
        report.positive = bool(report.min_xi > 0)
    logger.info(f"Martingale check: {'pass' if report.passed else 'FAIL'} "
                f"(min xi {report.min_xi:.4g})")
    return report


# ---------------------------------------------------------------------------
# Tail bound check
# ---------------------------------------------------------------------------

def tail_bound(kappa: float, T: float, level: float) -> float:
    """(12/n) sqrt(kappa T / 2 pi) exp(-n^2 / (18 kappa T))."""
    return 12.0 / level * math.sqrt(kappa * T / (2.0 * math.pi)) * math.exp(-level ** 2 / (18.0 * kappa * T))


@dataclass
class TailRow:
    level: float
    bound: float
    empirical: float
    exceedances: int
    passed: bool


@dataclass
class TailReport:
    kappa: float
    T: float
    drift: bool
    n_paths: int
    rows: List[TailRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "kappa": self.kappa, "T": self.T, "drift": self.drift,
                "n_paths": self.n_paths, "rows": [vars(r) for r in self.rows]}


def _running_max_abs(kappa: float, T: float, config: SimConfig, drift: bool, x0: float,
                     path_indices: np.ndarray) -> np.ndarray:
    mesh = _time_mesh(0.0, T, config.dt)
    normals = _NormalBlocks(config.seed, path_indices, len(mesh) - 1)
    # driftless: M = sqrt(kappa) W; drifted: M = sqrt(kappa/2) W, C = kappa t / 2
    scale = math.sqrt(kappa / 2.0) if drift else math.sqrt(kappa)
    X = np.full(len(path_indices), x0)
    M = np.zeros(len(path_indices))
    running_max = np.abs(X)
    for k in range(len(mesh) - 1):
        step = float(mesh[k + 1] - mesh[k])
        M = M + scale * math.sqrt(step) * normals.step(k)[:, 0]
        X = x0 + M + (0.5 * kappa * float(mesh[k + 1]) if drift else 0.0)
        running_max = np.maximum(running_max, np.abs(X))
    return running_max


def check_tail_bound(kappa: float, T: float, n_levels: Sequence[float], config: SimConfig,
                     drift: bool = False, x0: float = 0.0,
                     pool: Optional[WorkerPool] = None) -> TailReport:
    """
    Compare P{max |X_t| >= n} with the semimartingale tail bound for each level n.

    X = x0 + M + C with |C_t| + <M>_t <= kappa t: M = sqrt(kappa) W and C = 0,
    or with drift=True M = sqrt(kappa/2) W and C_t = kappa t / 2.

    Raises:
        TailBoundError: if some level is not above 3 max(|x0|, kappa T)
    """
    if kappa <= 0 or T <= 0:
        raise TailBoundError(f"kappa and T must be positive, got kappa={kappa}, T={T}")
    threshold = TAIL_LEVEL_FACTOR * max(abs(x0), kappa * T)
    for level in n_levels:
        if level <= threshold:
            raise TailBoundError(f"level {level} is not above 3 max(|x|, kappa T) = {threshold}")

    pool = pool or WorkerPool()
    maxima = np.concatenate(pool.map(lambda ids: _running_max_abs(kappa, T, config, drift, x0, ids),
                                     _chunks(config.n_paths), label="tail_chunk"))
    report = TailReport(kappa=kappa, T=T, drift=drift, n_paths=config.n_paths)
    for level in n_levels:
        hits = int(np.count_nonzero(maxima >= level))
        empirical = hits / config.n_paths
        bound = tail_bound(kappa, T, level)
        report.rows.append(TailRow(level=float(level), bound=bound, empirical=empirical,
                                   exceedances=hits, passed=empirical <= bound))
        logger.info(f"Tail level {level}: empirical {empirical:.3g} vs bound {bound:.4g}")
    return report

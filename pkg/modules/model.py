"""
Coefficients of the controlled payoff / Girsanov-density / quality system.

State x = (P, xi, theta), control u = (eta, c) in [0, N] x [0, C]. All
coefficient functions broadcast over numpy arrays, so the same code serves a
single point, a grid slice or a batch of Monte Carlo paths.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from config.constants import MAX_EXPONENT, gronwall_constant
from config.settings import ELL_MESH_POINTS
from utils.errors import BoundOverflowError, ConditionError, ModelValidationError
from utils.logger import setup_logger

logger = setup_logger(__name__)

ArrayLike = Union[float, np.ndarray]

STATE_AXES = ("P", "xi", "theta")


class TimeFunction(BaseModel):
    """
    Deterministic function of time from a named family.

    constant:   c0
    linear:     c0 + c1 t
    sinusoidal: c0 + c1 sin(c2 t + c3)
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["constant", "linear", "sinusoidal"] = "constant"
    coefficients: Tuple[float, ...] = (0.0,)

    @model_validator(mode="after")
    def _check_coefficients(self) -> "TimeFunction":
        expected = {"constant": 1, "linear": 2, "sinusoidal": 4}[self.kind]
        if len(self.coefficients) != expected:
            raise ValueError(f"{self.kind} time function needs {expected} coefficients, "
                             f"got {len(self.coefficients)}")
        if not all(math.isfinite(c) for c in self.coefficients):
            raise ValueError("time function coefficients must be finite")
        return self

    def __call__(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=float)
        c = self.coefficients
        if self.kind == "constant":
            value = np.full_like(t, c[0])
        elif self.kind == "linear":
            value = c[0] + c[1] * t
        else:
            value = c[0] + c[1] * np.sin(c[2] * t + c[3])
        return value if value.ndim else float(value)

    def max_abs(self, horizon: float, n_points: int = ELL_MESH_POINTS) -> float:
        """max |f(t)| over a uniform mesh of [0, horizon]."""
        return float(np.max(np.abs(self(np.linspace(0.0, horizon, n_points)))))


class PayoffFamily(BaseModel):
    """
    Built-in payoff coefficient family

        phi(t, P, eta, c) = s(t) * (base + payoff_slope * P + output_slope * Phi(eta, c))

    with s(t) = t for "time_linear" and s(t) = 1 for "autonomous". The
    time_linear family with payoff_slope = 0 satisfies every growth condition;
    a nonzero payoff_slope or the autonomous kind breaks the linear-in-t bound.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["time_linear", "autonomous"] = "time_linear"
    base: float = 0.0
    payoff_slope: float = 0.0
    output_slope: float = 0.0

    @field_validator("base", "payoff_slope", "output_slope")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("payoff family coefficients must be finite")
        return v

    def __call__(self, t: ArrayLike, P: ArrayLike, output: ArrayLike) -> ArrayLike:
        scale = np.asarray(t, dtype=float) if self.kind == "time_linear" else 1.0
        return scale * (self.base + self.payoff_slope * np.asarray(P, dtype=float)
                        + self.output_slope * np.asarray(output, dtype=float))

    def time_scale_bound(self, horizon: float) -> float:
        return horizon if self.kind == "time_linear" else 1.0

    @property
    def linear_in_time(self) -> bool:
        return self.kind == "time_linear" and self.payoff_slope == 0.0


class ModelParams(BaseModel):
    """All coefficients of the control system."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    A: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    k: float = 1.0
    gamma: float = 2.0
    varrho: float = 2.0
    N: float = 1.0
    C: float = 1.0
    H: float = 3.0
    R: float = 1.0
    T: float = 1.0
    ell: TimeFunction = TimeFunction(kind="constant", coefficients=(0.5,))
    theta_drift: TimeFunction = TimeFunction(kind="constant", coefficients=(0.1,))
    theta_vol: TimeFunction = TimeFunction(kind="constant", coefficients=(0.3,))
    payoff_drift: PayoffFamily = PayoffFamily(base=0.2, output_slope=0.5)
    payoff_vol: PayoffFamily = PayoffFamily(base=0.2)

    @model_validator(mode="after")
    def _check_scalars(self) -> "ModelParams":
        for name in ("A", "varrho", "N", "C", "H", "R", "T"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and strictly positive, got {value}")
        # zero is allowed for these: k = 0 freezes the running cost, a zero
        # exponent turns its factor into 1
        for name in ("alpha", "beta", "k", "gamma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        if self.H < 2:
            raise ValueError(f"H must be at least 2 so the cutoff band is nonempty, got {self.H}")
        return self

    @property
    def c4_compliant(self) -> bool:
        """True when both payoff families are bounded by a multiple of t uniformly in P."""
        return self.payoff_drift.linear_in_time and self.payoff_vol.linear_in_time

    @property
    def max_output(self) -> float:
        """A C^alpha N^beta, the largest value of the production function."""
        return self.A * self.C ** self.alpha * self.N ** self.beta

    def payoff_drift_at(self, t: ArrayLike, P: ArrayLike, u: "Control") -> ArrayLike:
        return self.payoff_drift(t, P, cobb_douglas(self, u))

    def payoff_vol_at(self, t: ArrayLike, P: ArrayLike, u: "Control") -> ArrayLike:
        return self.payoff_vol(t, P, cobb_douglas(self, u))


@dataclass(frozen=True)
class State:
    """A point (P, xi, theta) of the state space; fields may be arrays of equal shape."""
    P: ArrayLike
    xi: ArrayLike
    theta: ArrayLike

    def in_closed_space(self, params: ModelParams) -> ArrayLike:
        """Membership in [R, inf) x [0, inf) x [-H, H]."""
        inside = ((np.asarray(self.P) >= params.R) & (np.asarray(self.xi) >= 0.0)
                  & (np.abs(np.asarray(self.theta)) <= params.H))
        return inside if inside.ndim else bool(inside)

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(np.asarray(self.P, dtype=float),
                                            np.asarray(self.xi, dtype=float),
                                            np.asarray(self.theta, dtype=float)))

    def to_dict(self) -> Dict[str, float]:
        return {"P": float(self.P), "xi": float(self.xi), "theta": float(self.theta)}


@dataclass(frozen=True)
class Control:
    """Effort eta and investment c; fields may be arrays of equal shape."""
    eta: ArrayLike
    c: ArrayLike

    @classmethod
    def clamped(cls, params: ModelParams, eta: ArrayLike, c: ArrayLike) -> "Control":
        """Build a control with the box constraints enforced."""
        eta = np.clip(np.asarray(eta, dtype=float), 0.0, params.N)
        c = np.clip(np.asarray(c, dtype=float), 0.0, params.C)
        return cls(eta if eta.ndim else float(eta), c if c.ndim else float(c))

    def to_dict(self) -> Dict[str, float]:
        return {"eta": float(self.eta), "c": float(self.c)}


DEFAULT_CONTROL = Control(0.0, 0.0)


class ControlGrid(BaseModel):
    """Discretization of the control box used for every sup/inf over controls."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    eta_levels: Tuple[float, ...] = (0.0, 0.5, 1.0)
    c_levels: Tuple[float, ...] = (0.0, 0.5, 1.0)

    @field_validator("eta_levels", "c_levels")
    @classmethod
    def _increasing(cls, levels: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(levels) == 0:
            raise ValueError("control levels must be nonempty")
        if any(v < 0 or not math.isfinite(v) for v in levels):
            raise ValueError("control levels must be finite and nonnegative")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("control levels must be strictly increasing")
        return levels

    @classmethod
    def uniform(cls, params: ModelParams, n_eta: int, n_c: int) -> "ControlGrid":
        return cls(eta_levels=tuple(np.linspace(0.0, params.N, n_eta).tolist()),
                   c_levels=tuple(np.linspace(0.0, params.C, n_c).tolist()))

    def check_endpoints(self, params: ModelParams):
        """Raise unless the levels span exactly [0, N] x [0, C]."""
        if self.eta_levels[0] != 0.0 or not math.isclose(self.eta_levels[-1], params.N):
            raise ModelValidationError(f"eta levels must run from 0 to N={params.N}")
        if self.c_levels[0] != 0.0 or not math.isclose(self.c_levels[-1], params.C):
            raise ModelValidationError(f"c levels must run from 0 to C={params.C}")

    @property
    def size(self) -> int:
        return len(self.eta_levels) * len(self.c_levels)

    def flat_controls(self) -> Tuple[np.ndarray, np.ndarray]:
        """(eta, c) of every grid control, eta-index major, c-index minor."""
        eta, c = np.meshgrid(np.asarray(self.eta_levels), np.asarray(self.c_levels), indexing="ij")
        return eta.ravel(), c.ravel()

    def control(self, index: int) -> Control:
        eta, c = self.flat_controls()
        return Control(float(eta[index]), float(c[index]))

    def controls(self) -> List[Control]:
        eta, c = self.flat_controls()
        return [Control(float(e), float(v)) for e, v in zip(eta, c)]


def default_desk_model(**overrides: Any) -> ModelParams:
    """The desk-scale model used by examples and tests."""
    return ModelParams(**overrides)


def frozen_payoff_model(**overrides: Any) -> ModelParams:
    """k = 0 and zero payoff coefficients: -P xi solves the HJB problem exactly."""
    values = dict(k=0.0, payoff_drift=PayoffFamily(), payoff_vol=PayoffFamily())
    values.update(overrides)
    return ModelParams(**values)


def _clamp(params: ModelParams, u: Control) -> Control:
    return Control.clamped(params, u.eta, u.c)


def cobb_douglas(params: ModelParams, u: Control) -> ArrayLike:
    """A c^alpha eta^beta; np.power gives 0^x = 0 for x > 0 and 0^0 = 1."""
    u = _clamp(params, u)
    return params.A * np.power(u.c, params.alpha) * np.power(u.eta, params.beta)


def _psi(s: np.ndarray) -> np.ndarray:
    positive = s > 0
    safe = np.where(positive, s, 1.0)
    return np.where(positive, np.exp(-1.0 / safe), 0.0)


def _smooth_step(s: ArrayLike) -> np.ndarray:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    left, right = _psi(s), _psi(1.0 - s)
    return left / (left + right)


def _smooth_step_derivative(s: ArrayLike) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    safe = np.where(inside, s, 0.5)
    left, right = _psi(safe), _psi(1.0 - safe)
    slope = (left * right / safe ** 2 + left * right / (1.0 - safe) ** 2) / (left + right) ** 2
    return np.where(inside, slope, 0.0)


def cutoff_zeta(params: ModelParams, theta: ArrayLike) -> ArrayLike:
    """Even smooth bump: 1 on [-(H-1), H-1], 0 outside (-H, H)."""
    value = 1.0 - _smooth_step(np.abs(np.asarray(theta, dtype=float)) - (params.H - 1.0))
    return value if value.ndim else float(value)


def cutoff_zeta_derivative(params: ModelParams, theta: ArrayLike) -> ArrayLike:
    """d zeta_H / d theta, zero off the transition bands."""
    theta = np.asarray(theta, dtype=float)
    value = -np.sign(theta) * _smooth_step_derivative(np.abs(theta) - (params.H - 1.0))
    return value if value.ndim else float(value)


def truncation_cutoff(params: ModelParams, rho: float, x: State) -> ArrayLike:
    """
    Smooth cutoff equal to 1 on the closed truncated region
    [R, rho] x [1/rho, rho] x [-H, H] and 0 outside the rho + 1 region.
    """
    P = np.asarray(x.P, dtype=float)
    xi = np.asarray(x.xi, dtype=float)
    lower_xi, lower_gap = 1.0 / (rho + 1.0), 1.0 / rho - 1.0 / (rho + 1.0)
    value = ((1.0 - _smooth_step(P - rho))
             * (1.0 - _smooth_step(xi - rho))
             * _smooth_step((xi - lower_xi) / lower_gap))
    return value if value.ndim else float(value)


def _stack3(a: ArrayLike, b: ArrayLike, c: ArrayLike) -> np.ndarray:
    return np.stack(np.broadcast_arrays(np.asarray(a, dtype=float),
                                        np.asarray(b, dtype=float),
                                        np.asarray(c, dtype=float)))


def xi_exposure(params: ModelParams, t: ArrayLike, x: State, u: Control) -> ArrayLike:
    """h = (theta + Phi(eta, c) - ell(t)) / varrho, the density's exposure to w."""
    return (np.asarray(x.theta, dtype=float) + cobb_douglas(params, u) - params.ell(t)) / params.varrho


def drift_vector(params: ModelParams, t: ArrayLike, x: State, u: Control) -> np.ndarray:
    """(b(t, P, u), 0, theta(t) zeta_H(theta)), stacked on the first axis."""
    u = _clamp(params, u)
    return _stack3(params.payoff_drift_at(t, x.P, u),
                   0.0,
                   params.theta_drift(t) * cutoff_zeta(params, x.theta))


def vol_vector(params: ModelParams, t: ArrayLike, x: State, u: Control) -> np.ndarray:
    """(sigma(t, P, u), -xi h, sigma(t) zeta_H(theta)), stacked on the first axis."""
    u = _clamp(params, u)
    return _stack3(params.payoff_vol_at(t, x.P, u),
                   -np.asarray(x.xi, dtype=float) * xi_exposure(params, t, x, u),
                   params.theta_vol(t) * cutoff_zeta(params, x.theta))


def diffusion_matrix(params: ModelParams, t: ArrayLike, x: State, u: Control,
                     epsilon: float = 0.0) -> np.ndarray:
    """sigma sigma^T + epsilon^2 I, shape (3, 3) + broadcast shape."""
    if epsilon < 0:
        raise ModelValidationError(f"epsilon must be nonnegative, got {epsilon}")
    sig = vol_vector(params, t, x, u)
    a = sig[:, None] * sig[None, :]
    identity = np.eye(3).reshape((3, 3) + (1,) * (sig.ndim - 1))
    return a + epsilon ** 2 * identity


def running_cost(params: ModelParams, x: State, u: Control) -> ArrayLike:
    """k eta^gamma xi."""
    u = _clamp(params, u)
    return params.k * np.power(u.eta, params.gamma) * np.asarray(x.xi, dtype=float)


def terminal_boundary_value(x: State) -> ArrayLike:
    """-P xi, the value on the lateral boundary and at the horizon."""
    return -np.asarray(x.P, dtype=float) * np.asarray(x.xi, dtype=float)


def hamiltonian_terms(params: ModelParams, grid: ControlGrid, t: ArrayLike, x: State,
                      z: np.ndarray, M: np.ndarray, epsilon: float = 0.0) -> np.ndarray:
    """
    Bracket -f.z - tr(a M)/2 - L for every grid control.

    Args:
        z: gradient, shape (3,) + site shape
        M: Hessian, shape (3, 3) + site shape

    Returns:
        Array of shape (grid.size,) + site shape, controls in flat grid order
    """
    z = np.asarray(z, dtype=float)
    M = np.asarray(M, dtype=float)
    terms = []
    for eta, c in zip(*grid.flat_controls()):
        u = Control(eta, c)
        f = drift_vector(params, t, x, u)
        a = diffusion_matrix(params, t, x, u, epsilon)
        bracket = (-np.sum(f * z, axis=0)
                   - 0.5 * np.sum(a * M, axis=(0, 1))
                   - running_cost(params, x, u))
        terms.append(bracket)
    return np.stack(np.broadcast_arrays(*terms))


def hamiltonian_batch(params: ModelParams, grid: ControlGrid, t: ArrayLike, x: State,
                      z: np.ndarray, M: np.ndarray, epsilon: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized Hamiltonian: (values, flat control index of the maximizer)."""
    terms = hamiltonian_terms(params, grid, t, x, z, M, epsilon)
    index = np.argmax(terms, axis=0)  # first maximum: lowest (eta, c) index
    return np.take_along_axis(terms, index[None, ...], axis=0)[0], index


def hamiltonian(params: ModelParams, grid: ControlGrid, t: float, x: State,
                z: np.ndarray, M: np.ndarray, epsilon: float = 0.0) -> Tuple[float, Control]:
    """H(t, x, z, M) = max over grid controls of -f.z - tr(a M)/2 - L, with its maximizer."""
    values, index = hamiltonian_batch(params, grid, t, x, z, M, epsilon)
    return float(values), grid.control(int(index))


# ---------------------------------------------------------------------------
# Growth conditions
# ---------------------------------------------------------------------------

CONDITION_GROWTH_FACTOR = 10.0
CONDITION_ABS_TOL = 1e-12


@dataclass
class ConditionResult:
    """Outcome of one coefficient condition"""
    name: str
    passed: bool
    constant: float
    witness: Optional[Dict[str, float]] = None
    note: str = ""


@dataclass
class ConditionReport:
    """Outcome of validate_conditions"""
    sample_budget: int
    results: Dict[str, ConditionResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "sample_budget": self.sample_budget,
            "conditions": {name: vars(r) for name, r in self.results.items()},
        }


@dataclass
class _Samples:
    t: np.ndarray
    P: np.ndarray
    eta: np.ndarray
    c: np.ndarray

    def point(self, i: int) -> Dict[str, float]:
        return {"t": float(self.t[i]), "P": float(self.P[i]),
                "eta": float(self.eta[i]), "c": float(self.c[i])}


def _coefficients(params: ModelParams, s: _Samples, P: Optional[np.ndarray] = None,
                  t: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    t = s.t if t is None else t
    P = s.P if P is None else P
    u = Control(s.eta, s.c)
    with np.errstate(over="ignore", invalid="ignore"):
        b = np.asarray(params.payoff_drift_at(t, P, u), dtype=float) * np.ones_like(P)
        sig = np.asarray(params.payoff_vol_at(t, P, u), dtype=float) * np.ones_like(P)
    for name, values in (("payoff drift", b), ("payoff volatility", sig)):
        bad = ~np.isfinite(values)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            point = s.point(i)
            point.update(t=float(np.broadcast_to(t, P.shape)[i]), P=float(P[i]))
            raise ConditionError(f"non-finite {name}", point)
    return b, sig


def _growth_verdict(name: str, core: np.ndarray, far: np.ndarray, samples: _Samples,
                    far_samples: _Samples, note: str) -> ConditionResult:
    core_max = float(np.max(core)) if core.size else 0.0
    far_max = float(np.max(far)) if far.size else 0.0
    constant = max(core_max, far_max)
    if far_max > CONDITION_GROWTH_FACTOR * core_max + CONDITION_ABS_TOL:
        i = int(np.argmax(far))
        return ConditionResult(name, False, constant, far_samples.point(i),
                               f"{note}: ratio grows from {core_max:.4g} to {far_max:.4g}")
    return ConditionResult(name, True, constant, None, note)


def _concat(*sets: _Samples) -> _Samples:
    return _Samples(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("t", "P", "eta", "c")))


def validate_conditions(params: ModelParams, sample_budget: int, seed: int = 0) -> ConditionReport:
    """
    Empirical check of the payoff coefficient conditions.

    C1 Lipschitz in P, C2 polynomial growth in P, C3 C^{1,2} smoothness by
    finite-difference probes, C4 |b| + |sigma| <= L5 t. Each growth ratio is
    sampled on a core region and on far regions (large P, small t); a ratio
    that keeps growing in the far region is reported as a violation with the
    sample that exhibits it.

    Args:
        params: Model parameters
        sample_budget: Samples per region
        seed: Seed of the sampler

    Returns:
        ConditionReport with one ConditionResult per condition
    """
    if sample_budget < 1:
        raise ModelValidationError(f"sample_budget must be at least 1, got {sample_budget}")
    rng = np.random.default_rng(seed)
    n = sample_budget
    T, R = params.T, params.R

    def controls() -> Tuple[np.ndarray, np.ndarray]:
        return rng.uniform(0.0, params.N, n), rng.uniform(0.0, params.C, n)

    core = _Samples(rng.uniform(0.5 * T, T, n), rng.uniform(R, 10.0 * R, n), *controls())
    far_P = _Samples(rng.uniform(0.5 * T, T, n), R * 10.0 ** rng.uniform(2.0, 6.0, n), *controls())
    far_t = _Samples(T * 10.0 ** rng.uniform(-8.0, -2.0, n), rng.uniform(R, 10.0 * R, n), *controls())
    far = _concat(far_P, far_t)
    report = ConditionReport(sample_budget=n)

    # C1: Lipschitz constant in P
    def lipschitz(s: _Samples) -> np.ndarray:
        shifted = s.P * (1.0 + rng.uniform(0.01, 1.0, s.P.size))
        b0, s0 = _coefficients(params, s)
        b1, s1 = _coefficients(params, s, P=shifted)
        gap = shifted - s.P
        return np.maximum(np.abs(b1 - b0), np.abs(s1 - s0)) / gap

    report.results["C1"] = _growth_verdict("C1", lipschitz(core), lipschitz(far), core, far,
                                           "Lipschitz constant in P")

    # C2: |b|^2 + |sigma|^2 <= L2^2 (1 + P^2)
    def growth(s: _Samples) -> np.ndarray:
        b, sig = _coefficients(params, s)
        return np.sqrt((b ** 2 + sig ** 2) / (1.0 + s.P ** 2))

    report.results["C2"] = _growth_verdict("C2", growth(core), growth(far), core, far,
                                           "polynomial growth constant in P")

    # C3: second differences in t and P converge under step halving
    report.results["C3"] = _smoothness_probe(params, core)

    # C4: |b| + |sigma| <= L5 t
    def linear_in_t(s: _Samples) -> np.ndarray:
        b, sig = _coefficients(params, s)
        return (np.abs(b) + np.abs(sig)) / s.t

    report.results["C4"] = _growth_verdict("C4", linear_in_t(core), linear_in_t(far), core, far,
                                           "linear growth constant in t")

    for name, result in report.results.items():
        status = "pass" if result.passed else "VIOLATED"
        logger.info(f"Condition {name}: {status} (constant {result.constant:.4g})")
    return report


def _smoothness_probe(params: ModelParams, s: _Samples, step: float = 1e-3) -> ConditionResult:
    worst = 0.0
    witness = None
    for axis in ("t", "P"):
        base = getattr(s, axis)
        h = step * np.maximum(1.0, np.abs(base))
        if axis == "t":
            # keep the stencil inside [0, T]
            base = np.clip(base, 2 * h, params.T - 2 * h)

        def second_difference(hh: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            values = []
            for offset in (-1.0, 0.0, 1.0):
                shifted = base + offset * hh
                if axis == "t":
                    values.append(_coefficients(params, s, t=shifted))
                else:
                    values.append(_coefficients(params, s, P=shifted))
            b = (values[2][0] - 2 * values[1][0] + values[0][0]) / hh ** 2
            sig = (values[2][1] - 2 * values[1][1] + values[0][1]) / hh ** 2
            return b, sig

        coarse = second_difference(h)
        fine = second_difference(0.5 * h)
        for c_val, f_val in zip(coarse, fine):
            # a C^2 family has second differences that stabilize under refinement
            mismatch = np.abs(c_val - f_val) / (1.0 + np.abs(f_val))
            if not np.all(np.isfinite(mismatch)):
                i = int(np.flatnonzero(~np.isfinite(mismatch))[0])
                return ConditionResult("C3", False, math.inf, s.point(i),
                                       f"non-finite second difference in {axis}")
            i = int(np.argmax(mismatch))
            if mismatch[i] > worst:
                worst, witness = float(mismatch[i]), s.point(i)
    passed = worst <= 1e-2
    return ConditionResult("C3", passed, worst, None if passed else witness,
                           "max relative change of second differences under step halving")


# ---------------------------------------------------------------------------
# Cost bound
# ---------------------------------------------------------------------------

def payoff_growth_constant(params: ModelParams) -> float:
    """
    Analytic L2 with |b|^2 + |sigma|^2 <= L2^2 (1 + P^2) for the built-in families.

    |s(t)(m0 + m1 P + m2 Phi)| <= S (m + |m1| P) with m = |m0| + |m2| Phi_max,
    and (m + |m1| P)^2 <= 2 max(m^2, m1^2) (1 + P^2).
    """
    total = 0.0
    for family in (params.payoff_drift, params.payoff_vol):
        scale = family.time_scale_bound(params.T)
        m = abs(family.base) + abs(family.output_slope) * params.max_output
        total += 2.0 * scale ** 2 * max(m ** 2, family.payoff_slope ** 2)
    return math.sqrt(total)


def derived_K(params: ModelParams) -> float:
    """The frozen Gronwall constant for this model (see config.constants)."""
    return gronwall_constant(payoff_growth_constant(params), params.T)


def cost_growth_bound(params: ModelParams, y: State, derived_K: float) -> float:
    """
    Upper bound on |J(s, y, u)| uniform over controls:

        xi_y T [k N^gamma + K (1 + P^2) e^{K T} + exp((H + A C^alpha N^beta + ell*)^2 T / varrho^2)]

    Raises:
        BoundOverflowError: if either exponential leaves the float range
    """
    if derived_K <= 0:
        raise ModelValidationError(f"derived_K must be positive, got {derived_K}")
    xi = float(y.xi)
    if xi == 0.0:
        return 0.0
    ell_star = params.ell.max_abs(params.T)
    density_exponent = (params.H + params.max_output + ell_star) ** 2 * params.T / params.varrho ** 2
    payoff_exponent = derived_K * params.T
    for exponent in (density_exponent, payoff_exponent):
        if exponent > MAX_EXPONENT:
            raise BoundOverflowError(f"cost bound exponent {exponent:.4g} exceeds the float range "
                                     f"(H={params.H}, varrho={params.varrho})")
    bracket = (params.k * params.N ** params.gamma
               + derived_K * (1.0 + float(y.P) ** 2) * math.exp(payoff_exponent)
               + math.exp(density_exponent))
    bound = xi * params.T * bracket
    if not math.isfinite(bound):
        raise BoundOverflowError(f"cost bound overflows for y={y.to_dict()}")
    return bound

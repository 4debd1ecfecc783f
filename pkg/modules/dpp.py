"""
Monte Carlo checks of the dynamic programming property of a solved grid.

The lower check must hold for every candidate control; the upper check asks
it of one supplied near-optimal policy.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config.settings import MC_SE_SLACK
from modules.hjb import GreedyPolicy, PolicyTable, ValueGrid, interpolate_value
from modules.model import ControlGrid, ModelParams, State
from modules.sde import McEstimate, PolicySource, SimConfig, simulate_costs
from utils.errors import ModelValidationError
from utils.file_handler import write_csv_file
from utils.logger import setup_logger
from utils.parallel import WorkerPool

logger = setup_logger(__name__)

Candidate = Tuple[str, PolicySource]


class StoppingRule(BaseModel):
    """theta = t*, the first exit from a ball of radius r around the start, or T."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["fixed_time", "first_exit", "horizon"] = "horizon"
    time: Optional[float] = None
    radius: Optional[float] = Field(None, gt=0)

    def validate_for(self, params: ModelParams, s: float) -> "StoppingRule":
        if self.kind == "fixed_time" and (self.time is None or not s <= self.time <= params.T):
            raise ModelValidationError(f"fixed_time rule needs a time in [{s}, {params.T}], got {self.time}")
        if self.kind == "first_exit" and self.radius is None:
            raise ModelValidationError("first_exit rule needs a positive radius")
        return self

    @property
    def label(self) -> str:
        if self.kind == "fixed_time":
            return f"fixed_time_{self.time:g}"
        if self.kind == "first_exit":
            return f"first_exit_{self.radius:g}"
        return "horizon"


@dataclass
class CandidateRow:
    label: str
    mean: float
    std_error: float
    gap: float
    passed: bool
    extrapolated: int = 0


@dataclass
class DppReport:
    """One side of the dynamic programming check at (s, y)"""
    side: str
    rule: str
    v_at_start: float
    slack: float
    rows: List[CandidateRow] = field(default_factory=list)

    @property
    def best_rhs(self) -> float:
        return min(r.mean for r in self.rows) if self.rows else math.nan

    @property
    def gap(self) -> float:
        return self.best_rhs - self.v_at_start

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {"side": self.side, "rule": self.rule, "passed": self.passed,
                "v_at_start": self.v_at_start, "best_rhs": self.best_rhs, "gap": self.gap,
                "slack": self.slack, "candidates": [vars(r) for r in self.rows]}

    def write_table(self, path: Path) -> bool:
        return write_csv_file(path, ["label", "mean", "std_error", "gap", "passed", "extrapolated"],
                              [(r.label, r.mean, r.std_error, r.gap, int(r.passed), r.extrapolated)
                               for r in self.rows])


def candidate_controls(control_grid: ControlGrid, greedy: Optional[GreedyPolicy] = None,
                       table: Optional[PolicyTable] = None) -> List[Candidate]:
    """Constant grid controls, then the greedy policy and the discrete table when given."""
    candidates: List[Candidate] = [(f"constant(eta={u.eta:g},c={u.c:g})", u) for u in control_grid.controls()]
    if greedy is not None:
        candidates.append(("greedy", greedy))
    if table is not None:
        candidates.append(("policy_table", table))
    return candidates


def _rhs_estimate(params: ModelParams, grid: ValueGrid, s: float, y: State, rule: StoppingRule,
                  policy: PolicySource, mc: SimConfig, v_at_start: float,
                  pool: Optional[WorkerPool]) -> Tuple[McEstimate, int]:
    """Estimate E[int_s^{theta ^ tau} L dt + V(theta ^ tau, x(theta ^ tau))]."""
    if rule.kind == "fixed_time" and rule.time == s:
        return McEstimate(mean=v_at_start, std_error=0.0, n=0), 0

    config = mc.model_copy(update={"rho_trunc": grid.spec.rho})
    stop_rules: Dict[str, Any] = {}
    if rule.kind == "fixed_time":
        stop_rules["stop_time"] = rule.time
    elif rule.kind == "first_exit":
        stop_rules["stop_radius"] = rule.radius
    batch = simulate_costs(params, config, s, y, policy, grid.spec.epsilon, pool, **stop_rules)

    # exited or at the horizon: the value is the boundary data -P xi
    stop_value = -batch.P * batch.xi
    stopped = ~batch.exited & (batch.stop_time < params.T)
    extrapolated = 0
    if stopped.any():
        values, outside = grid.interpolate(batch.stop_time[stopped], batch.P[stopped],
                                           batch.xi[stopped], batch.theta[stopped])
        stop_value = stop_value.copy()
        stop_value[stopped] = values
        extrapolated = int(np.count_nonzero(outside))
        if extrapolated:
            logger.warning(f"{extrapolated} stopped states were outside the grid hull; values clamped")
    return McEstimate.from_samples(batch.running + stop_value), extrapolated


def verify_dp_lower(params: ModelParams, grid: ValueGrid, s: float, y: State, rule: StoppingRule,
                    controls: Sequence[Candidate], mc: SimConfig, tolerance: float,
                    pool: Optional[WorkerPool] = None) -> DppReport:
    """
    V(s, y) <= E[int L dt + V(theta ^ tau, x(theta ^ tau))] for every candidate,
    up to 4 standard errors plus tolerance.
    """
    rule.validate_for(params, s)
    if not controls:
        raise ModelValidationError("the lower check needs at least one candidate control")
    v_at_start = interpolate_value(grid, s, y)
    report = DppReport(side="lower", rule=rule.label, v_at_start=v_at_start, slack=MC_SE_SLACK)
    for label, policy in controls:
        estimate, extrapolated = _rhs_estimate(params, grid, s, y, rule, policy, mc, v_at_start, pool)
        gap = estimate.mean - v_at_start
        passed = v_at_start <= estimate.mean + MC_SE_SLACK * estimate.std_error + tolerance
        report.rows.append(CandidateRow(label, estimate.mean, estimate.std_error, gap, passed, extrapolated))
        logger.debug(f"DP lower [{label}]: rhs {estimate.mean:.6g} +/- {estimate.std_error:.3g}, gap {gap:.3g}")
    logger.info(f"DP lower check ({rule.label}): {'pass' if report.passed else 'FAIL'}, gap {report.gap:.4g}")
    return report


def verify_dp_upper(params: ModelParams, grid: ValueGrid, s: float, y: State, rule: StoppingRule,
                    policy: PolicySource, mc: SimConfig, delta: float, label: str = "policy",
                    pool: Optional[WorkerPool] = None) -> DppReport:
    """V(s, y) + delta >= E[int L dt + V(theta ^ tau, x(theta ^ tau))] for the supplied policy."""
    rule.validate_for(params, s)
    if delta < 0:
        raise ModelValidationError(f"delta must be nonnegative, got {delta}")
    v_at_start = interpolate_value(grid, s, y)
    report = DppReport(side="upper", rule=rule.label, v_at_start=v_at_start, slack=MC_SE_SLACK)
    estimate, extrapolated = _rhs_estimate(params, grid, s, y, rule, policy, mc, v_at_start, pool)
    gap = estimate.mean - v_at_start
    passed = v_at_start + delta + MC_SE_SLACK * estimate.std_error >= estimate.mean
    report.rows.append(CandidateRow(label, estimate.mean, estimate.std_error, gap, passed, extrapolated))
    logger.info(f"DP upper check ({rule.label}, {label}): {'pass' if passed else 'FAIL'}, gap {gap:.4g}")
    return report

"""
RunConfig: the single JSON document that drives one CLI run.

Every section has defaults, unknown keys are rejected and cross-section
invariants (grid and simulation settings against the model) are checked
before any computation starts.
"""

import math
from pathlib import Path
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from modules.dpp import StoppingRule
from modules.hjb import GridSpec
from modules.model import Control, ModelParams, State
from modules.sde import SimConfig


def _parse_infinity(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "+inf"):
        return math.inf
    return value


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class StartPoint(_Section):
    s: float = 0.0
    P: float = 1.5
    xi: float = 1.0
    theta: float = 0.0

    def state(self) -> State:
        return State(self.P, self.xi, self.theta)


class ConstantControl(_Section):
    eta: float = Field(0.0, ge=0)
    c: float = Field(0.0, ge=0)

    def control(self, params: ModelParams) -> Control:
        return Control.clamped(params, self.eta, self.c)


class LadderSection(_Section):
    epsilon0: float = Field(0.5, gt=0, lt=1)
    n_max: int = Field(3, ge=1)
    rho_schedule: List[float] = [4.0]
    tol: float = Field(1e-2, gt=0)

    infinite_tolerance = field_validator("tol", mode="before")(_parse_infinity)


class PolicySection(_Section):
    M: int = Field(4, ge=1)
    K0: int = Field(8, ge=1)
    delta: float = Field(0.25, gt=0)
    eps_target: float = Field(0.1, gt=0)
    s: float = Field(0.0, ge=0)


class SimulateSection(_Section):
    start: StartPoint = StartPoint()
    policy: Literal["constant", "greedy", "table"] = "constant"
    control: ConstantControl = ConstantControl()
    policy_file: Optional[str] = None
    epsilon: float = Field(0.0, ge=0)
    n_traces: int = Field(0, ge=0)


class DppSection(_Section):
    start: StartPoint = StartPoint()
    rule: StoppingRule = StoppingRule()
    tolerance: float = Field(1e-2, ge=0)
    delta: Optional[float] = Field(None, ge=0)
    upper_policy: Literal["greedy", "table"] = "greedy"


class ViscositySection(_Section):
    c1: float = Field(1.0, gt=0)
    tolerance: Optional[float] = Field(None, ge=0)
    stencil_radius: int = Field(1, ge=1)
    max_sites: Optional[int] = Field(2000, ge=1)
    seed: int = Field(0, ge=0)

    infinite_tolerance = field_validator("tolerance", mode="before")(_parse_infinity)


class MartingaleSection(_Section):
    start: StartPoint = StartPoint()
    control: ConstantControl = ConstantControl(eta=1.0, c=1.0)


class TailSection(_Section):
    kappa: float = Field(1.0, gt=0)
    T: float = Field(1.0, gt=0)
    levels: List[float] = [3.5, 5.0]
    drift: bool = False
    x0: float = 0.0
    n_paths: Optional[int] = Field(None, ge=1)


class ConditionsSection(_Section):
    sample_budget: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)


class BoundSection(_Section):
    start: StartPoint = StartPoint()
    control: Optional[ConstantControl] = None


class RunConfig(_Section):
    """Resolved configuration of one run"""
    model: ModelParams = ModelParams()
    grid: GridSpec = GridSpec()
    sim: SimConfig = SimConfig()
    ladder: LadderSection = LadderSection()
    policy: PolicySection = PolicySection()
    simulate: SimulateSection = SimulateSection()
    dpp: DppSection = DppSection()
    viscosity: ViscositySection = ViscositySection()
    martingale: MartingaleSection = MartingaleSection()
    tail: TailSection = TailSection()
    conditions: ConditionsSection = ConditionsSection()
    bound: BoundSection = BoundSection()
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_against_model(self) -> "RunConfig":
        self.grid.validate_for(self.model)
        self.sim.validate_for(self.model)
        for rho in self.ladder.rho_schedule:
            self.grid.model_copy(update={"rho": rho}).validate_for(self.model)
        if any(b <= a for a, b in zip(self.ladder.rho_schedule, self.ladder.rho_schedule[1:])):
            raise ValueError("ladder.rho_schedule must be increasing")
        return self

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        """Parse and validate; raises pydantic.ValidationError or OSError."""
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return self.model_copy(update={"sim": self.sim.model_copy(update={"seed": seed})})

"""Exception hierarchy for the control suite."""


class ControlSuiteError(Exception):
    """Base class for every error raised by the suite."""


class ModelValidationError(ControlSuiteError, ValueError):
    """Parameters, grids or initial states violate their invariants."""


class ConditionError(ControlSuiteError):
    """A payoff coefficient produced a non-finite value at a sample point."""

    def __init__(self, message: str, sample: dict):
        super().__init__(f"{message} at {sample}")
        self.sample = sample


class BoundOverflowError(ControlSuiteError, OverflowError):
    """The exponential term of the cost bound exceeds the float range."""


class SimulationError(ControlSuiteError):
    """A state update produced a non-finite value."""

    def __init__(self, message: str, coefficients: dict):
        super().__init__(f"{message}; coefficients: {coefficients}")
        self.coefficients = coefficients


class TailBoundError(ControlSuiteError, ValueError):
    """A tail level is too small for the bound to apply."""


class JetFitError(ControlSuiteError):
    """The local quadratic fit around a site is rank deficient."""


class GridMismatchError(ControlSuiteError, ValueError):
    """Two value grids do not share the same specification."""


class MissingArtifactError(ControlSuiteError, FileNotFoundError):
    """A verification command needs an artifact that has not been produced."""

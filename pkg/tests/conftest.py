import pytest

from config import settings
from modules.hjb import GridSpec
from modules.model import (
    ControlGrid,
    TimeFunction,
    default_desk_model,
    frozen_payoff_model,
)
from modules.sde import SimConfig


def constant(value: float) -> TimeFunction:
    return TimeFunction(kind="constant", coefficients=(value,))


@pytest.fixture
def desk_model():
    return default_desk_model()


@pytest.fixture
def frozen_model():
    """k = 0 and zero payoff coefficients: -P xi is the exact value."""
    return frozen_payoff_model()


@pytest.fixture
def still_model():
    """Every coordinate frozen when started at theta = 0 under the zero control."""
    return frozen_payoff_model(ell=constant(0.0), theta_drift=constant(0.0), theta_vol=constant(0.0))


@pytest.fixture
def control_grid(desk_model):
    return ControlGrid.uniform(desk_model, 3, 3)


@pytest.fixture
def small_spec(control_grid):
    return GridSpec(rho=3.0, nP=5, nXi=5, nTheta=5, nT=3, epsilon=0.0, control_grid=control_grid)


@pytest.fixture
def sim_config():
    return SimConfig(dt=0.05, n_paths=400, seed=7)


@pytest.fixture
def run_dir(tmp_path):
    previous = settings.CURRENT_RUN_DIR
    settings.CURRENT_RUN_DIR = tmp_path
    yield tmp_path
    settings.CURRENT_RUN_DIR = previous


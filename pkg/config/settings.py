import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# File Paths
PROJECT_ROOT = Path(__file__).parent.parent
BASE_OUTPUTS_DIR = Path(os.getenv("CONTROL_SUITE_OUTPUT_DIR", str(PROJECT_ROOT / "outputs")))

# Current run directory (will be set when a command starts)
CURRENT_RUN_DIR = None
CURRENT_RUN_TIMESTAMP = None

# Artifact file names (use get_output_file() to get current paths)
VALUE_GRID_HEADER_FILE = "value_grid.json"
VALUE_GRID_VALUES_FILE = "value_grid.csv"
GREEDY_POLICY_FILE = "greedy_policy.csv"
POLICY_TABLE_FILE = "policy_table.csv"
CONVERGENCE_REPORT_FILE = "convergence_report.json"
ESTIMATE_FILE = "estimate.json"
TRACE_FILE = "trace_{index}.csv"
VERIFY_REPORT_FILE = "verify_{which}.json"
RESIDUALS_FILE = "viscosity_residuals_{kind}.csv"
DPP_TABLE_FILE = "dpp_{side}_{rule}.csv"
PERFORMANCE_METRICS_FILE = "performance_metrics.json"

# Concurrency
DEFAULT_THREADS = int(os.getenv("CONTROL_SUITE_THREADS", "1"))
MC_CHUNK_SIZE = 4096  # paths per worker job

# Monte Carlo comparisons
MC_SE_SLACK = 4.0  # standard errors of slack on every estimator comparison

# Solver
CFL_SAFETY = 0.9  # fraction of the explicit stability bound actually used
TIE_RTOL = 1e-10  # relative tolerance when ranking controls for the stored policy
ROUNDOFF_RTOL = 1e-12  # relative floor when comparing exactly-propagated quantities
ELL_MESH_POINTS = 10001  # time mesh for max |ell(t)|

# Logging Configuration
LOG_LEVEL = os.getenv("CONTROL_SUITE_LOG_LEVEL", "INFO")
LOG_FILE = PROJECT_ROOT / "control_suite.log"

#!/usr/bin/env python3
"""
Degenerate Control Suite - Main Orchestrator

Batch front-end for the solver and verification suite:
1. solve          - truncation / vanishing-viscosity ladder, policies
2. simulate       - Monte Carlo cost estimate of a policy
3. verify         - dpp, viscosity, martingale, tail, conditions, bound
4. export-policy  - discrete policy table from a solved grid

Exit statuses: 0 pass, 1 usage/config error, 2 budget/convergence failure,
3 verification failure.
"""

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from config import settings
from config.run_config import RunConfig
from config.settings import (
    CONVERGENCE_REPORT_FILE,
    DPP_TABLE_FILE,
    ESTIMATE_FILE,
    GREEDY_POLICY_FILE,
    POLICY_TABLE_FILE,
    RESIDUALS_FILE,
    TRACE_FILE,
    VERIFY_REPORT_FILE,
)
from modules.dpp import candidate_controls, verify_dp_lower, verify_dp_upper
from modules.hjb import (
    PolicyTable,
    ValueGrid,
    audit_value_bound,
    extract_policy,
    interpolate_value,
    solve_ladder,
    solve_regularized,
    synthesize_discrete_policy,
)
from modules.model import Control, cost_growth_bound, derived_K, validate_conditions
from modules.sde import TRACE_COLUMNS, check_tail_bound, check_xi_martingale, estimate_cost, simulate_path
from modules.viscosity import (
    check_comparison,
    check_subsolution,
    check_supersolution,
    default_sites,
    scaled_tolerance,
)
from utils.errors import BoundOverflowError, ControlSuiteError, MissingArtifactError
from utils.evaluator import evaluator
from utils.file_handler import (
    create_run_directory,
    file_exists,
    get_output_file,
    read_json_file,
    set_run_directory,
    write_csv_file,
    write_json_file,
)
from utils.logger import setup_logger
from utils.parallel import WorkerPool

logger = setup_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BUDGET = 2
EXIT_VERIFY = 3

VERIFY_SUITES = ("conditions", "bound", "martingale", "tail", "viscosity", "dpp")


class ControlSuiteOrchestrator:
    """Runs one CLI command against a validated RunConfig."""

    def __init__(self, config: RunConfig, out_dir: Optional[Path] = None, threads: Optional[int] = None):
        self.config = config
        self.pool = WorkerPool(threads)
        target = out_dir or (Path(config.output_dir) if config.output_dir else None)
        self.run_dir = set_run_directory(target) if target else create_run_directory()
        logger.info(f"Run directory: {self.run_dir}")

    @property
    def run_header(self) -> Dict[str, Any]:
        """Resolved config and seed; no timestamps so repeated runs are byte-identical."""
        return {"config": self.config.model_dump(mode="python"), "seed": self.config.sim.seed}

    def _write_report(self, filename: str, payload: Dict[str, Any]) -> Path:
        path = get_output_file(filename)
        write_json_file(path, {"run": self.run_header, **payload})
        return path

    def _timed(self, stage: str, fn: Callable[[], Any], **details: Any) -> Any:
        start = time.time()
        result = fn()
        evaluator.track_stage(stage, time.time() - start, **details)
        return result

    def _load_grid(self) -> ValueGrid:
        return ValueGrid.load(self.run_dir)

    def _load_table(self, path: Optional[Path] = None) -> PolicyTable:
        return PolicyTable.load(path or get_output_file(POLICY_TABLE_FILE))

    def _preamble(self) -> List[str]:
        return [json.dumps(self.run_header, sort_keys=True, default=str)]

    # ------------------------------------------------------------------
    # solve
    # ------------------------------------------------------------------

    def run_solve(self) -> int:
        cfg = self.config
        logger.info("=== SOLVE ===")
        grid, report = self._timed("solve_ladder", lambda: solve_ladder(
            cfg.model, cfg.grid, cfg.ladder.epsilon0, cfg.ladder.n_max, cfg.ladder.rho_schedule, cfg.ladder.tol))
        grid.save(self.run_dir, header_extra={"run": self.run_header, "ladder": report.to_dict()})
        self._write_report(CONVERGENCE_REPORT_FILE, report.to_dict())
        self._export_policies(grid)
        if not report.converged:
            logger.error("Ladder budget exhausted before convergence")
            return EXIT_BUDGET
        return EXIT_OK

    def _export_policies(self, grid: ValueGrid):
        cfg = self.config
        greedy = extract_policy(cfg.model, grid)
        write_csv_file(get_output_file(GREEDY_POLICY_FILE), ["t", "P", "xi", "theta", "eta", "c"],
                       greedy.rows(), preamble=self._preamble())
        table = self._timed("synthesize_policy", lambda: synthesize_discrete_policy(
            cfg.model, grid, cfg.policy.M, cfg.policy.K0, cfg.policy.delta, cfg.policy.eps_target, cfg.policy.s))
        table.save(get_output_file(POLICY_TABLE_FILE), preamble=self._preamble())

    def run_export_policy(self) -> int:
        logger.info("=== EXPORT POLICY ===")
        self._export_policies(self._load_grid())
        return EXIT_OK

    # ------------------------------------------------------------------
    # simulate
    # ------------------------------------------------------------------

    def _policy(self, kind: str, control: Control, policy_file: Optional[str] = None):
        if kind == "constant":
            return control
        if kind == "greedy":
            return extract_policy(self.config.model, self._load_grid())
        return self._load_table(Path(policy_file) if policy_file else None)

    def run_simulate(self) -> int:
        cfg = self.config
        section = cfg.simulate
        logger.info("=== SIMULATE ===")
        policy = self._policy(section.policy, section.control.control(cfg.model), section.policy_file)
        s, y = section.start.s, section.start.state()
        estimate = self._timed("estimate_cost", lambda: estimate_cost(
            cfg.model, cfg.sim, s, y, policy, section.epsilon, self.pool), n_paths=cfg.sim.n_paths)
        payload: Dict[str, Any] = {"estimate": estimate.to_dict(), "policy": section.policy}
        if file_exists(self.run_dir / settings.VALUE_GRID_HEADER_FILE):
            grid_value = interpolate_value(self._load_grid(), s, y)
            payload["grid_value"] = grid_value
            payload["gap_to_grid"] = estimate.mean - grid_value
        self._write_report(ESTIMATE_FILE, payload)

        for index in range(section.n_traces):
            result = simulate_path(cfg.model, cfg.sim, s, y, policy, section.epsilon,
                                   path_index=index, record_trace=True)
            write_csv_file(get_output_file(TRACE_FILE.format(index=index)), TRACE_COLUMNS,
                           result.trace or [], preamble=self._preamble() + [json.dumps(result.to_dict())])
        return EXIT_OK

    # ------------------------------------------------------------------
    # verify
    # ------------------------------------------------------------------

    def run_verify(self, which: str) -> int:
        suites = VERIFY_SUITES if which == "all" else (which,)
        failed = []
        for suite in suites:
            logger.info(f"=== VERIFY {suite.upper()} ===")
            passed = self._timed(f"verify_{suite}", getattr(self, f"verify_{suite}"))
            if not passed:
                failed.append(suite)
        if failed:
            logger.error(f"Verification failed: {', '.join(failed)}")
            return EXIT_VERIFY
        return EXIT_OK

    def verify_conditions(self) -> bool:
        cfg = self.config
        report = validate_conditions(cfg.model, cfg.conditions.sample_budget, cfg.conditions.seed)
        self._write_report(VERIFY_REPORT_FILE.format(which="conditions"), report.to_dict())
        return report.passed

    def verify_bound(self) -> bool:
        cfg = self.config
        start = cfg.bound.start
        control = (cfg.bound.control.control(cfg.model) if cfg.bound.control
                   else Control(cfg.model.N, cfg.model.C))
        payload: Dict[str, Any] = {"control": control.to_dict()}
        try:
            K = derived_K(cfg.model)
            bound = cost_growth_bound(cfg.model, start.state(), K)
        except BoundOverflowError as e:
            payload.update(passed=False, error=str(e))
            self._write_report(VERIFY_REPORT_FILE.format(which="bound"), payload)
            return False
        estimate = estimate_cost(cfg.model, cfg.sim, start.s, start.state(), control, 0.0, self.pool)
        passed = abs(estimate.mean) <= bound
        payload.update(derived_K=K, bound=bound, estimate=estimate.to_dict())
        if file_exists(self.run_dir / settings.VALUE_GRID_HEADER_FILE):
            audit = audit_value_bound(cfg.model, self._load_grid())
            payload["grid_audit"] = audit.to_dict()
            passed = passed and audit.passed
        payload["passed"] = passed
        self._write_report(VERIFY_REPORT_FILE.format(which="bound"), payload)
        return passed

    def verify_martingale(self) -> bool:
        cfg = self.config
        section = cfg.martingale
        report = check_xi_martingale(cfg.model, cfg.sim, section.start.s, section.start.state(),
                                     section.control.control(cfg.model), self.pool)
        self._write_report(VERIFY_REPORT_FILE.format(which="martingale"), report.to_dict())
        return report.passed

    def verify_tail(self) -> bool:
        cfg = self.config
        section = cfg.tail
        sim = cfg.sim if section.n_paths is None else cfg.sim.model_copy(update={"n_paths": section.n_paths})
        sim = sim.model_copy(update={"dt": min(sim.dt, section.T)})
        report = check_tail_bound(section.kappa, section.T, section.levels, sim, section.drift, section.x0, self.pool)
        self._write_report(VERIFY_REPORT_FILE.format(which="tail"), report.to_dict())
        return report.passed

    def verify_viscosity(self) -> bool:
        cfg = self.config
        section = cfg.viscosity
        grid = self._load_grid()
        tolerance = section.tolerance if section.tolerance is not None else scaled_tolerance(grid, section.c1)
        sites = default_sites(grid, section.stencil_radius, section.max_sites, section.seed)
        reports = {}
        for kind, check in (("sub", check_subsolution), ("super", check_supersolution)):
            report = check(cfg.model, grid, None, tolerance, sites, section.stencil_radius)
            report.write_residuals(get_output_file(RESIDUALS_FILE.format(kind=kind)))
            reports[kind] = report
        # a fresh solve of the same spec must agree with the stored grid both ways
        fresh = solve_regularized(cfg.model, grid.spec)
        comparison = [check_comparison(fresh, grid, tolerance), check_comparison(grid, fresh, tolerance)]
        passed = all(r.passed for r in reports.values()) and all(c.passed for c in comparison)
        self._write_report(VERIFY_REPORT_FILE.format(which="viscosity"), {
            "passed": passed,
            "tolerance": tolerance if math.isfinite(tolerance) else "inf",
            "subsolution": reports["sub"].to_dict(),
            "supersolution": reports["super"].to_dict(),
            "comparison": [c.to_dict() for c in comparison],
        })
        return passed

    def _scheme_tolerance(self) -> float:
        path = get_output_file(CONVERGENCE_REPORT_FILE)
        if not file_exists(path):
            return 0.0
        return float(read_json_file(path).get("scheme_tolerance", 0.0))

    def verify_dpp(self) -> bool:
        cfg = self.config
        section = cfg.dpp
        grid = self._load_grid()
        greedy = extract_policy(cfg.model, grid)
        table_path = get_output_file(POLICY_TABLE_FILE)
        table = self._load_table(table_path) if file_exists(table_path) else None
        s, y = section.start.s, section.start.state()

        if section.upper_policy == "table" and table is None:
            raise MissingArtifactError(f"no policy table at {table_path}; run export-policy first")
        candidates = candidate_controls(grid.spec.control_grid, greedy, table)
        lower = verify_dp_lower(cfg.model, grid, s, y, section.rule, candidates, cfg.sim,
                                section.tolerance, self.pool)
        upper_policy = table if section.upper_policy == "table" else greedy
        delta = section.delta if section.delta is not None else self._scheme_tolerance()
        upper = verify_dp_upper(cfg.model, grid, s, y, section.rule, upper_policy, cfg.sim, delta,
                                label=section.upper_policy, pool=self.pool)

        for report in (lower, upper):
            report.write_table(get_output_file(DPP_TABLE_FILE.format(side=report.side, rule=report.rule)))
        passed = lower.passed and upper.passed
        self._write_report(VERIFY_REPORT_FILE.format(which="dpp"), {
            "passed": passed, "delta": delta, "lower": lower.to_dict(), "upper": upper.to_dict(),
        })
        return passed


def _config_error(message: str, errors: Any = None) -> int:
    print(json.dumps({"status": EXIT_USAGE, "error": message, "details": errors}, indent=2, default=str))
    logger.error(f"Configuration error: {message}")
    return EXIT_USAGE


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and return its exit status."""
    parser = argparse.ArgumentParser(
        description="Degenerate Control Suite",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py solve --config run.json --out outputs/desk     # Solve and export policies
  python main.py simulate --config run.json --out outputs/desk  # Monte Carlo cost estimate
  python main.py verify --which tail --config run.json          # Tail bound harness
  python main.py export-policy --config run.json --out outputs/desk
        """
    )
    parser.add_argument('command', choices=['solve', 'simulate', 'verify', 'export-policy'])
    parser.add_argument('--config', required=True, help='Path to the RunConfig JSON document')
    parser.add_argument('--out', help='Output directory (default: config output_dir or a new run directory)')
    parser.add_argument('--threads', type=int, help='Worker count cap')
    parser.add_argument('--seed', type=int, help='Override sim.seed')
    parser.add_argument('--which', choices=('all',) + VERIFY_SUITES, default='all',
                        help='Verification suite (verify only, default: all)')

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        config = RunConfig.from_file(Path(args.config)).with_seed(args.seed)
    except ValidationError as e:
        return _config_error("invalid configuration", e.errors(include_url=False))
    except (OSError, ValueError) as e:
        return _config_error(str(e))

    evaluator.start_command_tracking(args.command)
    try:
        orchestrator = ControlSuiteOrchestrator(config, Path(args.out) if args.out else None, args.threads)
        if args.command == 'solve':
            status = orchestrator.run_solve()
        elif args.command == 'simulate':
            status = orchestrator.run_simulate()
        elif args.command == 'verify':
            status = orchestrator.run_verify(args.which)
        else:
            status = orchestrator.run_export_policy()
        evaluator.finalize_command_metrics()
        return status
    except MissingArtifactError as e:
        logger.error(f"Missing artifact: {e}")
        return EXIT_USAGE
    except ControlSuiteError as e:
        logger.error(f"Command failed: {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.info("Command interrupted by user")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        return EXIT_USAGE


def main(argv: Optional[List[str]] = None):
    """Main entry point for the control suite."""
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

import time
from dataclasses import dataclass, asdict, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.settings import PERFORMANCE_METRICS_FILE
from utils.logger import setup_logger
from utils.file_handler import get_output_file, write_json_file

logger = setup_logger(__name__)


@dataclass
class StageMetrics:
    """Metrics for one stage of a command (a solve, an estimator, a check)"""
    stage_name: str
    wall_time_seconds: float
    details: Dict[str, Any] = field(default_factory=dict)
    timestamp: str = ""


@dataclass
class CommandMetrics:
    """Overall command metrics"""
    command: str
    total_time_seconds: float
    stages: List[StageMetrics]
    timestamp: str


class PerformanceEvaluator:
    """Tracks wall-clock performance of the stages of one CLI command"""

    def __init__(self):
        self.current_command: Optional[str] = None
        self.current_start: Optional[float] = None
        self.current_stages: List[StageMetrics] = []

    def start_command_tracking(self, command: str):
        """Start tracking a new command"""
        self.current_command = command
        self.current_start = time.time()
        self.current_stages = []
        logger.info(f"Started performance tracking for command: {command}")

    def track_stage(self, stage_name: str, wall_time: float, **details: Any) -> StageMetrics:
        """Record the wall time of a finished stage"""
        metrics = StageMetrics(
            stage_name=stage_name,
            wall_time_seconds=wall_time,
            details=details,
            timestamp=datetime.now().isoformat()
        )
        self.current_stages.append(metrics)
        logger.info(f"Stage metrics ({stage_name}) - wall time: {wall_time:.2f}s")
        return metrics

    def finalize_command_metrics(self, output_file: Optional[Path] = None) -> Optional[CommandMetrics]:
        """Finalize and save command metrics"""
        if self.current_start is None:
            logger.warning("Cannot finalize metrics - command tracking was not started")
            return None

        metrics = CommandMetrics(
            command=self.current_command or "unknown",
            total_time_seconds=time.time() - self.current_start,
            stages=list(self.current_stages),
            timestamp=datetime.now().isoformat()
        )
        target = output_file or get_output_file(PERFORMANCE_METRICS_FILE)
        write_json_file(target, asdict(metrics))
        self._log_summary(metrics)
        return metrics

    def _log_summary(self, metrics: CommandMetrics):
        """Log a summary of the command performance"""
        logger.info("=" * 60)
        logger.info("PERFORMANCE METRICS SUMMARY")
        logger.info("=" * 60)
        logger.info(f"Command: {metrics.command}")
        logger.info(f"Total Time: {metrics.total_time_seconds:.2f}s")
        for stage in metrics.stages:
            logger.info(f"  {stage.stage_name}: {stage.wall_time_seconds:.2f}s")
        logger.info("=" * 60)


# Global evaluator instance
evaluator = PerformanceEvaluator()

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, List, Optional, Sequence

from config.settings import DEFAULT_THREADS
from utils.logger import setup_logger

logger = setup_logger(__name__)


class JobStatus(Enum):
    QUEUED = "queued"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class Job:
    label: str
    status: JobStatus = JobStatus.QUEUED
    error: Optional[str] = None


class WorkerPool:
    """
    Thread pool for independent numerical jobs (Monte Carlo chunks, per-candidate
    estimates). Results come back in submission order, so any reduction over them
    does not depend on which worker finished first.

    Job records live only for the duration of one map call.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max(1, int(max_workers or DEFAULT_THREADS))

    @staticmethod
    def _run_job(job: Job, fn: Callable[[Any], Any], item: Any) -> Any:
        job.status = JobStatus.PROCESSING
        try:
            result = fn(item)
        except Exception as e:
            job.status = JobStatus.FAILED
            job.error = str(e)
            logger.error(f"Job {job.label} failed: {e}")
            raise
        job.status = JobStatus.COMPLETED
        return result

    def map(self, fn: Callable[[Any], Any], items: Sequence[Any], label: str = "job") -> List[Any]:
        """Apply fn to every item; returns results in the order of items."""
        jobs = [Job(label=f"{label}[{i}]") for i in range(len(items))]

        if self.max_workers == 1 or len(items) <= 1:
            return [self._run_job(job, fn, item) for job, item in zip(jobs, items)]

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(self._run_job, job, fn, item) for job, item in zip(jobs, items)]
            results = [future.result() for future in futures]
        logger.debug(f"{len(jobs)} {label} jobs completed on {self.max_workers} workers")
        return results

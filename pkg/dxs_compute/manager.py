"""
Compute task manager for dispatched fold training and separation jobs.

Submits a task through its proxy and polls the Celery result with a
timeout. Proxies that return a plain value (local compute mode) complete
immediately. Timed-out tasks are revoked with terminate=True.
"""

import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

from celery.result import AsyncResult

from dxs_compute.tasks import call_separate_subject, call_train_fold
from dxs_graph.config import TaskTimeouts
from dxs_graph.errors import ComputeTaskError
from dxs_graph.utils.live_logger import get_current_job_id, report_compute_task

logger = logging.getLogger(__name__)


class TaskStatus(Enum):
    """Compute task execution status."""
    PENDING = "pending"
    STARTED = "started"
    SUCCESS = "success"
    FAILURE = "failure"
    TIMEOUT = "timeout"
    REVOKED = "revoked"


@dataclass
class ComputeTaskResult:
    """Result from a compute task execution."""
    status: TaskStatus
    result: Optional[Any] = None
    error: Optional[str] = None
    task_id: Optional[str] = None
    elapsed_seconds: float = 0.0

    def unwrap(self, task_name: str = "task") -> Any:
        """Return the result or raise ComputeTaskError."""
        if self.status != TaskStatus.SUCCESS:
            raise ComputeTaskError(task_name, self.status.value, self.error or "no details")
        return self.result


class ComputeTaskManager:
    """Submits one task through its proxy and waits for the outcome."""

    def __init__(
        self,
        task_name: str,
        timeout: float = TaskTimeouts.TRAIN_FOLD,
        poll_interval: float = TaskTimeouts.POLL_INTERVAL,
    ):
        """
        Args:
            task_name: Name used in progress events and errors
            timeout: Seconds before a running task is revoked
            poll_interval: Seconds between readiness checks
        """
        self.task_name = task_name
        self.timeout = timeout
        self.poll_interval = poll_interval

    def execute_sync(
        self,
        task_func: Callable,
        args: tuple = (),
        kwargs: Optional[Dict] = None,
    ) -> ComputeTaskResult:
        """
        Run `task_func(*args, **kwargs)` and wait for its result.

        Exceptions raised by an in-process task propagate unchanged; a
        remote failure, revocation or timeout is reported in the result.
        """
        started = time.monotonic()
        outcome = task_func(*args, **(kwargs or {}))

        if not isinstance(outcome, AsyncResult):
            return ComputeTaskResult(
                status=TaskStatus.SUCCESS,
                result=outcome,
                task_id="direct-result",
                elapsed_seconds=time.monotonic() - started,
            )

        report_compute_task(self.task_name, f"submitted ({outcome.id})")
        try:
            finished = self._wait(outcome, started)
        except Exception as e:
            logger.warning(f"{self.task_name}: polling failed: {e}")
            return ComputeTaskResult(TaskStatus.FAILURE, error=str(e), task_id=outcome.id,
                                     elapsed_seconds=time.monotonic() - started)

        elapsed = time.monotonic() - started
        if not finished:
            self._revoke(outcome)
            report_compute_task(self.task_name, "timed out")
            return ComputeTaskResult(TaskStatus.TIMEOUT, error=f"no result after {self.timeout}s",
                                     task_id=outcome.id, elapsed_seconds=elapsed)
        return self._collect(outcome, elapsed)

    def _wait(self, outcome: AsyncResult, started: float) -> bool:
        """Poll until the task is ready (True) or the timeout passes (False)."""
        while time.monotonic() - started <= self.timeout:
            if outcome.ready():
                return True
            time.sleep(self.poll_interval)
        return False

    def _collect(self, outcome: AsyncResult, elapsed: float) -> ComputeTaskResult:
        if outcome.successful():
            report_compute_task(self.task_name, f"finished in {elapsed:.1f}s")
            return ComputeTaskResult(TaskStatus.SUCCESS, result=outcome.result, task_id=outcome.id,
                                     elapsed_seconds=elapsed)

        status = TaskStatus.REVOKED if outcome.status == "REVOKED" else TaskStatus.FAILURE
        message = str(outcome.result) if outcome.result else "no error details"
        report_compute_task(self.task_name, f"{status.value}: {message}")
        return ComputeTaskResult(status, error=message, task_id=outcome.id, elapsed_seconds=elapsed)

    def _revoke(self, outcome: AsyncResult) -> None:
        try:
            outcome.revoke(terminate=True, signal="SIGKILL")
        except Exception as e:
            logger.warning(f"{self.task_name}: could not revoke {outcome.id}: {e}")


# =============================================================================
# Pre-configured Managers
# =============================================================================

def create_train_fold_manager() -> ComputeTaskManager:
    return ComputeTaskManager(task_name="train_fold", timeout=TaskTimeouts.TRAIN_FOLD)


def create_separate_manager() -> ComputeTaskManager:
    return ComputeTaskManager(task_name="separate_subject", timeout=TaskTimeouts.SEPARATE)


# =============================================================================
# Dispatchers
# =============================================================================

PathLike = Union[str, Path]


def fold_dispatcher(
    dataset_dir: PathLike,
    reference_dir: Optional[PathLike],
    out_dir: PathLike,
    train_config: Dict[str, Any],
    network: Dict[str, Any],
) -> Callable[[Any], Dict[str, Any]]:
    """
    Callable for run_crossval that trains one fold through call_train_fold.

    The returned function takes a FoldPlan and returns its summary dict.
    """
    manager = create_train_fold_manager()

    def dispatch(plan) -> Dict[str, Any]:
        result = manager.execute_sync(call_train_fold, args=(
            str(dataset_dir),
            str(reference_dir) if reference_dir is not None else None,
            str(out_dir),
            train_config,
            network,
            plan.fold_index,
            get_current_job_id(),
        ))
        return result.unwrap(f"train_fold[{plan.fold_index}]")

    return dispatch


def separate_dispatcher(
    dataset_dir: PathLike,
    out_dir: PathLike,
    reference_config: Dict[str, Any],
    spectrum: Optional[Dict[str, Any]],
) -> Callable[[str], Dict[str, Any]]:
    """Callable for run_reference that separates one subject through call_separate_subject."""
    manager = create_separate_manager()

    def dispatch(subject_id: str) -> Dict[str, Any]:
        result = manager.execute_sync(call_separate_subject, args=(
            str(dataset_dir), str(out_dir), reference_config, spectrum, subject_id, get_current_job_id(),
        ))
        return result.unwrap(f"separate_subject[{subject_id}]")

    return dispatch

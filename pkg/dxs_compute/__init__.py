"""
Compute dispatch for dxs.

Provides a local worker pool capped by DXS_THREADS, Celery task proxies
for fold training and reference separation, and a task manager that polls
dispatched results.
"""

from dxs_compute.pool import WorkerPool

from dxs_compute.tasks import (
    call_separate_subject,
    call_train_fold,
)

from dxs_compute.manager import (
    ComputeTaskManager,
    ComputeTaskResult,
    TaskStatus,
    fold_dispatcher,
    separate_dispatcher,
)

from dxs_compute.health import ServiceStatus, probe_services

__all__ = [
    # Local pool
    "WorkerPool",
    # Task proxies
    "call_train_fold",
    "call_separate_subject",
    # Manager
    "ComputeTaskManager",
    "ComputeTaskResult",
    "TaskStatus",
    "fold_dispatcher",
    "separate_dispatcher",
    # Health
    "ServiceStatus",
    "probe_services",
]

"""
Celery tasks and proxies for dxs compute jobs.

Fold training and per-subject reference separation can run on Celery
workers sharing the dataset directory. With DXS_LOCAL_COMPUTE=true (the
default) the proxies execute the job in-process and return its result
directly.

Start a worker with:

    celery -A dxs_compute.tasks worker -Q compute --concurrency 1
"""

from typing import Any, Dict, Optional

from celery import Celery, signature

from dxs_graph.config import CELERY_BROKER_URL, CELERY_RESULT_BACKEND, is_local_compute
from dxs_graph.utils.live_logger import set_current_job_id

COMPUTE_QUEUE = "compute"

celery_app = Celery(
    "dxs",
    broker=CELERY_BROKER_URL,
    backend=CELERY_RESULT_BACKEND,
)

celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    enable_utc=True,
    task_track_started=True,
    task_acks_late=True,
    worker_prefetch_multiplier=1,
)


# =============================================================================
# Task Bodies (worker side)
# =============================================================================

@celery_app.task(name="dxs.train_fold")
def train_fold_task(
    dataset_dir: str,
    reference_dir: Optional[str],
    out_dir: str,
    train_config: Dict[str, Any],
    network: Dict[str, Any],
    fold_index: int,
    job_id: Optional[str] = None,
) -> Dict[str, Any]:
    from dxs_core.training import train_fold_job

    set_current_job_id(job_id)
    return train_fold_job(dataset_dir, reference_dir, out_dir, train_config, network, fold_index)


@celery_app.task(name="dxs.separate_subject")
def separate_subject_task(
    dataset_dir: str,
    out_dir: str,
    reference_config: Dict[str, Any],
    spectrum: Optional[Dict[str, Any]],
    subject_id: str,
    job_id: Optional[str] = None,
) -> Dict[str, Any]:
    from dxs_core.reference import separate_subject_job

    set_current_job_id(job_id)
    return separate_subject_job(dataset_dir, out_dir, reference_config, spectrum, subject_id)


# =============================================================================
# Task Signatures
# =============================================================================

_train_fold_task = signature("dxs.train_fold", queue=COMPUTE_QUEUE)
_separate_subject_task = signature("dxs.separate_subject", queue=COMPUTE_QUEUE)


# =============================================================================
# Task Proxy Functions
# =============================================================================

def call_train_fold(
    dataset_dir: str,
    reference_dir: Optional[str],
    out_dir: str,
    train_config: Dict[str, Any],
    network: Dict[str, Any],
    fold_index: int,
    job_id: Optional[str] = None,
) -> Any:
    """
    Train one cross-validation fold.

    Returns:
        Fold summary dict in local mode, AsyncResult otherwise
    """
    if is_local_compute():
        from dxs_core.training import train_fold_job

        return train_fold_job(dataset_dir, reference_dir, out_dir, train_config, network, fold_index)

    return _train_fold_task.delay(dataset_dir, reference_dir, out_dir, train_config, network, fold_index, job_id)


def call_separate_subject(
    dataset_dir: str,
    out_dir: str,
    reference_config: Dict[str, Any],
    spectrum: Optional[Dict[str, Any]],
    subject_id: str,
    job_id: Optional[str] = None,
) -> Any:
    """
    Reference separation of one stored subject.

    Returns:
        Subject summary dict in local mode, AsyncResult otherwise
    """
    if is_local_compute():
        from dxs_core.reference import separate_subject_job

        return separate_subject_job(dataset_dir, out_dir, reference_config, spectrum, subject_id)

    return _separate_subject_task.delay(dataset_dir, out_dir, reference_config, spectrum, subject_id, job_id)


TASK_ROUTES = {
    "dxs.train_fold": {"queue": COMPUTE_QUEUE},
    "dxs.separate_subject": {"queue": COMPUTE_QUEUE},
}

celery_app.conf.task_routes = TASK_ROUTES

"""
Progress channel for long runs.

A benchmark run is identified by a job id held in a context variable, so
worker threads started through WorkerPool see the same id. Every progress
event goes to the module logger; when a job id is set it is also appended
as JSON to the Redis list ``dxslog:<job>``, which `dxs logs <job> --follow`
reads from another terminal. Redis being unreachable never breaks a run.
"""

import contextvars
import json
import logging
import time
from typing import Iterator, List, Optional, Tuple, TypedDict

import redis

from dxs_graph.config import LIVE_LOG_DB, REDIS_HOST, REDIS_PORT

logger = logging.getLogger(__name__)

EVENT_TTL_SECONDS = 6 * 60 * 60


class ProgressEvent(TypedDict, total=False):
    """One entry of a run's progress list."""
    ts: float
    kind: str  # "message", "node", "epoch", "task" or "run"
    msg: str
    node: str
    status: str
    fold: int
    epoch: int
    train_loss: float
    val_loss: float
    exit_code: int


_redis_client: Optional[redis.Redis] = None


def get_redis() -> redis.Redis:
    """Lazily created client for the progress database."""
    global _redis_client
    if _redis_client is None:
        _redis_client = redis.Redis(
            host=REDIS_HOST,
            port=REDIS_PORT,
            db=LIVE_LOG_DB,
            decode_responses=True,
            socket_connect_timeout=0.5,
        )
    return _redis_client


_current_job_id: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar("current_job_id", default=None)


def set_current_job_id(job_id: Optional[str]):
    _current_job_id.set(job_id)


def get_current_job_id() -> Optional[str]:
    return _current_job_id.get()


def _key(job_id: str) -> str:
    return f"dxslog:{job_id}"


def publish(event: ProgressEvent, job_id: Optional[str] = None, level: int = logging.INFO) -> None:
    """
    Log an event and push it to the run's Redis list.

    Args:
        event: Event fields; "msg" is required
        job_id: Target run (default: the context's current job)
        level: Level for the local log record
    """
    logger.log(level, event["msg"])
    job_id = job_id or _current_job_id.get()
    if not job_id:
        return

    payload = json.dumps({"ts": time.time(), **event})
    try:
        client = get_redis()
        client.rpush(_key(job_id), payload)
        client.expire(_key(job_id), EVENT_TTL_SECONDS)
    except (redis.RedisError, OSError) as e:
        logger.debug(f"Progress event for {job_id} not published: {e}")


def report(msg: str, job_id: Optional[str] = None):
    """Free-form progress message."""
    publish(ProgressEvent(kind="message", msg=str(msg)), job_id)


def _node_event(node_name: str, status: str, details: str = "") -> ProgressEvent:
    msg = f"{status.capitalize()}: {node_name}"
    if details:
        msg += f" - {details}"
    return ProgressEvent(kind="node", node=node_name, status=status, msg=msg)


def report_node_start(node_name: str, details: str = ""):
    publish(_node_event(node_name, "starting", details))


def report_node_complete(node_name: str, details: str = ""):
    publish(_node_event(node_name, "completed", details))


def report_node_error(node_name: str, error: str):
    publish(_node_event(node_name, "failed", error), level=logging.ERROR)


def report_epoch(fold: int, epoch: int, train_loss: float, val_loss: float):
    """Loss-curve point of a finished epoch."""
    publish(ProgressEvent(
        kind="epoch",
        fold=fold,
        epoch=epoch,
        train_loss=train_loss,
        val_loss=val_loss,
        msg=f"[fold {fold}] epoch {epoch}: train={train_loss:.6f} val={val_loss:.6f}",
    ))


def report_compute_task(task_name: str, status: str):
    publish(ProgressEvent(kind="task", node=task_name, status=status,
                          msg=f"Compute task [{task_name}]: {status}"))


def report_run_finished(exit_code: int):
    """Final event of a run; followers stop reading after it."""
    status = "succeeded" if exit_code == 0 else "failed"
    publish(ProgressEvent(kind="run", status=status, exit_code=exit_code,
                          msg=f"Run {status} (exit code {exit_code})"))


# =============================================================================
# Reading
# =============================================================================

def read_events(job_id: str, since: int = 0) -> Tuple[List[ProgressEvent], int]:
    """
    Events of a run from index `since` on.

    Returns:
        (events, next index); ([], since) when Redis is unreachable
    """
    try:
        raw = get_redis().lrange(_key(job_id), since, -1)
    except (redis.RedisError, OSError):
        return [], since
    events = [json.loads(item) for item in raw]
    return events, since + len(events)


def follow(
    job_id: str,
    poll_interval: float = 1.0,
    idle_timeout: Optional[float] = None,
) -> Iterator[ProgressEvent]:
    """
    Yield a run's events as they arrive.

    Stops after the "run" event, or once no event arrived for
    `idle_timeout` seconds.
    """
    index = 0
    last_seen = time.monotonic()
    while True:
        events, index = read_events(job_id, index)
        for event in events:
            yield event
            if event.get("kind") == "run":
                return
        now = time.monotonic()
        if events:
            last_seen = now
        elif idle_timeout is not None and now - last_seen >= idle_timeout:
            return
        time.sleep(poll_interval)


def clear_events(job_id: str):
    try:
        get_redis().delete(_key(job_id))
    except (redis.RedisError, OSError):
        pass

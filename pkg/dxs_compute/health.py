"""
Reachability probes for the services behind remote compute.

Used by `dxs check --services` before switching DXS_LOCAL_COMPUTE off.
"""

import logging
from dataclasses import dataclass
from typing import List

import redis

from dxs_compute.tasks import COMPUTE_QUEUE, celery_app
from dxs_graph.config import REDIS_HOST, REDIS_PORT
from dxs_graph.utils import live_logger

logger = logging.getLogger(__name__)


@dataclass
class ServiceStatus:
    name: str
    ok: bool
    detail: str


def probe_redis(timeout: float = 5.0) -> ServiceStatus:
    try:
        client = redis.Redis(host=REDIS_HOST, port=REDIS_PORT, socket_timeout=timeout)
        client.ping()
    except (redis.RedisError, OSError) as e:
        return ServiceStatus("redis", False, str(e))
    return ServiceStatus("redis", True, f"{REDIS_HOST}:{REDIS_PORT}")


def probe_progress_channel() -> ServiceStatus:
    """The progress database accepts writes and reads."""
    key = "dxslog:health-probe"
    try:
        client = live_logger.get_redis()
        client.rpush(key, "{}")
        found = client.llen(key)
        client.delete(key)
    except (redis.RedisError, OSError) as e:
        return ServiceStatus("progress channel", False, str(e))
    return ServiceStatus("progress channel", bool(found), "writable" if found else "write not visible")


def probe_compute_workers(timeout: float = 5.0) -> ServiceStatus:
    """Some Celery worker consumes the compute queue."""
    try:
        queues = celery_app.control.inspect(timeout=timeout).active_queues()
    except Exception as e:
        logger.debug(f"Celery inspection failed: {e}")
        return ServiceStatus("compute workers", False, str(e))
    if not queues:
        return ServiceStatus("compute workers", False, "no workers responding")

    workers = sorted(
        worker for worker, queue_list in queues.items()
        if any(q.get("name") == COMPUTE_QUEUE for q in queue_list)
    )
    if not workers:
        return ServiceStatus("compute workers", False, f"no worker on queue '{COMPUTE_QUEUE}'")
    return ServiceStatus("compute workers", True, ", ".join(workers))


def probe_services() -> List[ServiceStatus]:
    return [probe_redis(), probe_progress_channel(), probe_compute_workers()]

"""Utility modules for dxs_graph."""

from dxs_graph.utils.live_logger import (
    ProgressEvent,
    clear_events,
    follow,
    get_current_job_id,
    publish,
    read_events,
    report,
    report_compute_task,
    report_epoch,
    report_node_complete,
    report_node_error,
    report_node_start,
    report_run_finished,
    set_current_job_id,
)

__all__ = [
    "ProgressEvent",
    "publish",
    "report",
    "report_node_start",
    "report_node_complete",
    "report_node_error",
    "report_epoch",
    "report_compute_task",
    "report_run_finished",
    "read_events",
    "follow",
    "clear_events",
    "set_current_job_id",
    "get_current_job_id",
]

"""
Routing functions for the benchmark pipeline's conditional edges.
"""

from typing import Callable

from dxs_graph.state.factory import has_fatal_error
from dxs_graph.state.schema import BenchmarkState

ERROR_NODE = "error_report"


def route_on_error(next_node: str) -> Callable[[BenchmarkState], str]:
    """
    Router continuing to `next_node` unless a fatal error was recorded.

    Returns:
        Routing function for add_conditional_edges
    """
    def route(state: BenchmarkState) -> str:
        if has_fatal_error(state):
            return ERROR_NODE
        return next_node

    route.__name__ = f"route_to_{next_node}"
    return route


def route_after_evaluation(state: BenchmarkState) -> str:
    """
    Loop back to training while echo configurations are pending.

    Returns:
        'error_report', 'training' or 'report'
    """
    if has_fatal_error(state):
        return ERROR_NODE
    if state.get("pending_configs"):
        return "training"
    return "report"

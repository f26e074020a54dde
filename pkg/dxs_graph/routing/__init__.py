"""
Routing functions for LangGraph conditional edges.
"""

from dxs_graph.routing.routes import (
    ERROR_NODE,
    route_after_evaluation,
    route_on_error,
)

__all__ = [
    "ERROR_NODE",
    "route_after_evaluation",
    "route_on_error",
]

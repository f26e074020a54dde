"""
State management for the dxs benchmark pipeline.

Provides TypedDict state schemas and factory functions for creating
and managing pipeline state.
"""

from dxs_graph.state.schema import (
    BenchmarkReport,
    BenchmarkRequest,
    BenchmarkState,
    ConfigRun,
    DatasetInfo,
    PipelineError,
    ReferenceInfo,
)

from dxs_graph.state.factory import (
    add_error,
    create_initial_state,
    get_exit_code,
    has_fatal_error,
    update_node_history,
)

__all__ = [
    # Schema classes
    "BenchmarkState",
    "BenchmarkRequest",
    "DatasetInfo",
    "ReferenceInfo",
    "ConfigRun",
    "BenchmarkReport",
    "PipelineError",
    # Factory functions
    "create_initial_state",
    "add_error",
    "update_node_history",
    "has_fatal_error",
    "get_exit_code",
]

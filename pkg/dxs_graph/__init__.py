"""
dxs graph - settings, errors and the LangGraph benchmark pipeline.

The pipeline chains dataset generation, reference separation, per-echo-
configuration cross-validation, evaluation and a comparison report. The
graph itself is imported lazily so that numerical modules can use the
settings and error types without pulling in langgraph.
"""

__version__ = "0.1.0"

__all__ = [
    "create_benchmark_graph",
    "run_benchmark",
    "BenchmarkState",
    "create_initial_state",
]


def __getattr__(name):
    if name in ("create_benchmark_graph", "run_benchmark"):
        from dxs_graph import graph

        return getattr(graph, name)
    if name == "BenchmarkState":
        from dxs_graph.state.schema import BenchmarkState

        return BenchmarkState
    if name == "create_initial_state":
        from dxs_graph.state.factory import create_initial_state

        return create_initial_state
    raise AttributeError(f"module 'dxs_graph' has no attribute {name!r}")

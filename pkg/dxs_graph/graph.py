"""
LangGraph construction for the dxs benchmark pipeline.

Runs the desk-scale protocol end to end: phantom dataset, reference
separation, then cross-validated training and evaluation for each echo
configuration, and finally a comparison report.
"""

import uuid
from typing import Any, Dict, List, Optional

from langgraph.graph import END, StateGraph

from dxs_graph.nodes.data import dataset_node, reference_node
from dxs_graph.nodes.report import error_report_node, report_node
from dxs_graph.nodes.training import evaluation_node, training_node
from dxs_graph.routing.routes import ERROR_NODE, route_after_evaluation, route_on_error
from dxs_graph.state.factory import create_initial_state, get_exit_code
from dxs_graph.state.schema import BenchmarkState
from dxs_graph.utils.live_logger import report_run_finished, set_current_job_id


def create_benchmark_graph() -> StateGraph:
    """
    Create the benchmark StateGraph.

    Graph structure:
        START
          |
          v
        dataset -> reference -> training -> evaluation --+--> report -> END
                                   ^                     |
                                   +---- more configs ---+
        (any fatal error) -> error_report -> END

    Returns:
        Configured StateGraph ready for compilation
    """
    graph = StateGraph(BenchmarkState)

    graph.add_node("dataset", dataset_node)
    graph.add_node("reference", reference_node)
    graph.add_node("training", training_node)
    graph.add_node("evaluation", evaluation_node)
    graph.add_node("report", report_node)
    graph.add_node(ERROR_NODE, error_report_node)

    graph.set_entry_point("dataset")

    graph.add_conditional_edges(
        "dataset", route_on_error("reference"), {"reference": "reference", ERROR_NODE: ERROR_NODE}
    )
    graph.add_conditional_edges(
        "reference", route_on_error("training"), {"training": "training", ERROR_NODE: ERROR_NODE}
    )
    graph.add_conditional_edges(
        "training", route_on_error("evaluation"), {"evaluation": "evaluation", ERROR_NODE: ERROR_NODE}
    )
    graph.add_conditional_edges(
        "evaluation",
        route_after_evaluation,
        {"training": "training", "report": "report", ERROR_NODE: ERROR_NODE},
    )
    graph.add_conditional_edges(
        "report", route_on_error(END), {END: END, ERROR_NODE: ERROR_NODE}
    )
    graph.add_edge(ERROR_NODE, END)

    return graph


def compile_graph():
    """Create and compile the benchmark graph."""
    return create_benchmark_graph().compile()


def run_benchmark(
    out_dir: str,
    run_config: Dict[str, Any],
    n_subjects: int = 60,
    master_seed: int = 0,
    echo_configs: Optional[List[str]] = None,
    fold: Optional[int] = 0,
    target: str = "reference",
    against: str = "truth",
    reuse_dataset: bool = True,
    job_id: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Run the complete benchmark pipeline.

    Args:
        out_dir: Output root
        run_config: Dumped RunConfig
        n_subjects: Cohort size
        master_seed: Dataset seed
        echo_configs: Echo subsets to compare
        fold: Train only this fold; None runs full cross-validation
        target: Training target
        against: Evaluation target
        reuse_dataset: Reuse a matching dataset/reference under out_dir
        job_id: Optional job ID (generated if not provided)

    Returns:
        Final pipeline state
    """
    if job_id is None:
        job_id = str(uuid.uuid4())[:8]
    set_current_job_id(job_id)

    initial_state = create_initial_state(
        job_id=job_id,
        out_dir=out_dir,
        run_config=run_config,
        n_subjects=n_subjects,
        master_seed=master_seed,
        echo_configs=echo_configs,
        fold=fold,
        target=target,
        against=against,
        reuse_dataset=reuse_dataset,
    )

    graph = compile_graph()
    # Each configuration adds two steps.
    limit = 10 + 2 * len(initial_state["pending_configs"])
    result = graph.invoke(initial_state, config={"recursion_limit": limit})
    report_run_finished(get_exit_code(result))
    return result

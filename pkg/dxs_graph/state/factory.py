"""
State factory functions for the dxs benchmark pipeline.

Helpers for creating, updating and inspecting pipeline state.
"""

import traceback
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from dxs_graph.errors import EXIT_DATA
from dxs_graph.state.schema import (
    BenchmarkReport,
    BenchmarkRequest,
    BenchmarkState,
    ConfigRun,
    DatasetInfo,
    PipelineError,
    ReferenceInfo,
)


def create_initial_state(
    job_id: str,
    out_dir: str,
    run_config: Dict[str, Any],
    n_subjects: int = 60,
    master_seed: int = 0,
    echo_configs: Optional[List[str]] = None,
    fold: Optional[int] = 0,
    target: str = "reference",
    against: str = "truth",
    reuse_dataset: bool = True,
) -> BenchmarkState:
    """
    Create an initial state for a new benchmark run.

    Args:
        job_id: Unique identifier for this run
        out_dir: Output root for dataset, reference, training and reports
        run_config: Dumped RunConfig
        n_subjects: Cohort size
        master_seed: Dataset seed
        echo_configs: Echo subsets to compare (default: all:1, odd:3, all:5)
        fold: Train only this fold; None trains all folds
        target: Training target ("reference" or "truth")
        against: Evaluation target ("truth" or "reference")
        reuse_dataset: Reuse an existing dataset under out_dir

    Returns:
        Initialized BenchmarkState
    """
    configs = list(echo_configs or ["all:1", "odd:3", "all:5"])
    return BenchmarkState(
        # Metadata
        job_id=job_id,
        thread_id=job_id,
        out_dir=out_dir,

        # Inputs
        request=BenchmarkRequest(
            n_subjects=n_subjects,
            master_seed=master_seed,
            echo_configs=configs,
            fold=fold,
            target=target,
            against=against,
            reuse_dataset=reuse_dataset,
        ),
        run_config=run_config,

        # Stage results (empty initially)
        dataset=DatasetInfo(),
        reference=ReferenceInfo(),
        pending_configs=configs,
        current_run=ConfigRun(),
        runs=[],
        report=BenchmarkReport(),

        # Tracking
        current_node="start",
        node_history=[],
        errors=[],
    )


def add_error(
    state: BenchmarkState,
    node: str,
    error: Exception,
    recoverable: bool = False,
) -> Dict[str, Any]:
    """
    Add an error to the pipeline state.

    Args:
        state: Current pipeline state
        node: Node where error occurred
        error: The exception that was raised
        recoverable: Whether the pipeline can continue

    Returns:
        State update dict with error added to errors list
    """
    error_info = PipelineError(
        node=node,
        error_type=type(error).__name__,
        message=str(error),
        traceback=traceback.format_exc(),
        timestamp=datetime.now(timezone.utc).isoformat(),
        recoverable=recoverable,
        exit_code=getattr(error, "exit_code", EXIT_DATA),
    )

    errors = list(state.get("errors", []))
    errors.append(error_info)

    return {"errors": errors}


def update_node_history(state: BenchmarkState, node: str) -> Dict[str, Any]:
    """
    Update the pipeline's node history.

    Returns:
        State update dict with updated history
    """
    history = list(state.get("node_history", []))
    history.append(node)

    return {
        "current_node": node,
        "node_history": history,
    }


def has_fatal_error(state: BenchmarkState) -> bool:
    """Check if state contains any non-recoverable errors."""
    errors = state.get("errors", [])
    return any(not e.get("recoverable", True) for e in errors)


def get_exit_code(state: BenchmarkState) -> int:
    """Exit code of the first fatal error, 0 if none."""
    for error in state.get("errors", []):
        if not error.get("recoverable", True):
            return int(error.get("exit_code", EXIT_DATA))
    return 0

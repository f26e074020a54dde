"""
State schema definitions for the dxs benchmark pipeline.

TypedDict state classes shared by the LangGraph nodes. Everything in the
state is JSON-compatible; run parameters travel as the dumped RunConfig
and are revalidated by the nodes that need them.
"""

from typing import Any, Dict, List, Literal, Optional, TypedDict


# =============================================================================
# Request State
# =============================================================================

class BenchmarkRequest(TypedDict, total=False):
    """What the benchmark should run."""
    n_subjects: int
    master_seed: int
    echo_configs: List[str]  # e.g. ["all:1", "odd:3", "all:5"]
    fold: Optional[int]  # quick mode: train only this fold
    target: Literal["reference", "truth"]
    against: Literal["reference", "truth"]
    reuse_dataset: bool


# =============================================================================
# Stage Results
# =============================================================================

class DatasetInfo(TypedDict, total=False):
    """Generated (or reused) phantom dataset."""
    dataset_dir: str
    n_subjects: int
    subject_ids: List[str]
    fatty_subjects: List[str]
    reused: bool


class ReferenceInfo(TypedDict, total=False):
    """Reference separation of the dataset."""
    reference_dir: str
    mean_ff_mae: float
    max_ff_mae: float


class ConfigRun(TypedDict, total=False):
    """Training and evaluation outcome for one echo configuration."""
    echoes: str
    n_echoes: int
    train_dir: str
    eval_dir: str
    folds: List[int]
    final_train_loss: float
    final_val_loss: float
    train_seconds: float
    liver_mae: float
    liver_bias: float
    voxel_mae: float
    normal_as_fatty: int
    fatty_as_normal: int


class BenchmarkReport(TypedDict, total=False):
    """Comparison across echo configurations."""
    report_path: str
    rows: List[ConfigRun]
    loss_decreases_with_echoes: bool
    mae_decreases_with_echoes: bool


# =============================================================================
# Pipeline Error State
# =============================================================================

class PipelineError(TypedDict, total=False):
    """Error information for pipeline debugging."""
    node: str  # Node where error occurred
    error_type: str  # Exception class name
    message: str
    traceback: Optional[str]
    timestamp: str  # ISO format
    recoverable: bool  # Whether the pipeline can continue
    exit_code: int


# =============================================================================
# Main Graph State
# =============================================================================

class BenchmarkState(TypedDict, total=False):
    """
    Main state schema for the benchmark pipeline.

    Aggregates the request, run configuration and stage results that flow
    between nodes.
    """
    # -------------------------
    # Pipeline Metadata
    # -------------------------
    job_id: str
    thread_id: str
    out_dir: str

    # -------------------------
    # Inputs
    # -------------------------
    request: BenchmarkRequest
    run_config: Dict[str, Any]  # RunConfig.model_dump(mode="json")

    # -------------------------
    # Stage Results
    # -------------------------
    dataset: DatasetInfo
    reference: ReferenceInfo
    pending_configs: List[str]
    current_run: ConfigRun
    runs: List[ConfigRun]
    report: BenchmarkReport

    # -------------------------
    # Pipeline Tracking
    # -------------------------
    current_node: str
    node_history: List[str]
    errors: List[PipelineError]

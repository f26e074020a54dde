"""
Data nodes for the benchmark pipeline.

- dataset: generate the phantom cohort (or reuse a matching one)
- reference: reference-surrogate separation of every subject
"""

from pathlib import Path
from typing import Any, Dict

from dxs_compute.manager import separate_dispatcher
from dxs_core.dataset import MANIFEST_NAME, read_manifest
from dxs_core.phantom import generate_dataset
from dxs_core.reference import run_reference
from dxs_core.run_config import parse_run_config
from dxs_core.tensorfile import read_json
from dxs_graph.state.factory import add_error, update_node_history
from dxs_graph.state.schema import BenchmarkState, DatasetInfo, ReferenceInfo
from dxs_graph.utils.live_logger import report, report_node_complete, report_node_error, report_node_start


def dataset_node(state: BenchmarkState) -> Dict[str, Any]:
    """
    Generate the phantom dataset below <out_dir>/dataset.

    An existing dataset is reused when reuse_dataset is set and its manifest
    matches the requested size and seed.
    """
    report_node_start("dataset")
    request = state.get("request", {})
    dataset_dir = Path(state["out_dir"]) / "dataset"
    n_subjects = request.get("n_subjects", 60)
    master_seed = request.get("master_seed", 0)

    try:
        cfg = parse_run_config(state.get("run_config", {}))
        manifest = None
        reused = False
        if request.get("reuse_dataset", True) and (dataset_dir / MANIFEST_NAME).exists():
            existing = read_manifest(dataset_dir)
            if len(existing.subjects) == n_subjects and existing.master_seed == master_seed:
                manifest = existing
                reused = True
                report(f"Reusing dataset in {dataset_dir}")
        if manifest is None:
            manifest = generate_dataset(n_subjects, master_seed, cfg.phantom_config(), dataset_dir)

        report_node_complete("dataset", f"{len(manifest.subjects)} subjects")
        return {
            "dataset": DatasetInfo(
                dataset_dir=str(dataset_dir),
                n_subjects=len(manifest.subjects),
                subject_ids=manifest.subject_ids,
                fatty_subjects=[s.subject_id for s in manifest.subjects if s.fatty],
                reused=reused,
            ),
            **update_node_history(state, "dataset"),
        }
    except Exception as e:
        report_node_error("dataset", str(e))
        return {
            **update_node_history(state, "dataset"),
            **add_error(state, "dataset", e, recoverable=False),
        }


def reference_node(state: BenchmarkState) -> Dict[str, Any]:
    """Run the reference separation through the compute dispatcher."""
    report_node_start("reference")
    dataset = state.get("dataset", {})
    reference_dir = Path(state["out_dir"]) / "reference"
    summary_path = reference_dir / "summary.json"

    try:
        cfg = parse_run_config(state.get("run_config", {}))
        summary = None
        if dataset.get("reused") and summary_path.exists():
            existing = read_json(summary_path)
            if len(existing.get("subjects", [])) == dataset.get("n_subjects"):
                summary = existing
                report(f"Reusing reference separation in {reference_dir}")
        if summary is None:
            dispatch = separate_dispatcher(
                dataset["dataset_dir"], reference_dir, cfg.reference.model_dump(), cfg.fat_spectrum.model_dump()
            )
            summary = run_reference(dataset["dataset_dir"], reference_dir, cfg.reference, cfg.fat_spectrum,
                                    dispatch=dispatch)

        report_node_complete("reference", f"mean FF MAE {summary['mean_ff_mae']:.5f}")
        return {
            "reference": ReferenceInfo(
                reference_dir=str(reference_dir),
                mean_ff_mae=summary["mean_ff_mae"],
                max_ff_mae=summary["max_ff_mae"],
            ),
            **update_node_history(state, "reference"),
        }
    except Exception as e:
        report_node_error("reference", str(e))
        return {
            **update_node_history(state, "reference"),
            **add_error(state, "reference", e, recoverable=False),
        }

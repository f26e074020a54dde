"""
Report nodes for the benchmark pipeline.
"""

import csv
import io
from pathlib import Path
from typing import Any, Dict, List

from dxs_core.tensorfile import atomic_write_json, atomic_write_text
from dxs_graph.state.factory import add_error, update_node_history
from dxs_graph.state.schema import BenchmarkReport, BenchmarkState, ConfigRun
from dxs_graph.utils.live_logger import report, report_node_complete, report_node_start

REPORT_COLUMNS = [
    "echoes", "n_echoes", "final_train_loss", "final_val_loss", "liver_mae", "liver_bias",
    "voxel_mae", "normal_as_fatty", "fatty_as_normal", "train_seconds",
]


def _strictly_decreasing(values: List[float]) -> bool:
    return all(a > b for a, b in zip(values, values[1:]))


def comparison_rows(runs: List[ConfigRun]) -> List[ConfigRun]:
    """Runs ordered by echo count, then by label."""
    return sorted(runs, key=lambda r: (r.get("n_echoes", 0), r.get("echoes", "")))


def rows_to_csv(rows: List[ConfigRun]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([row.get(column, "") for column in REPORT_COLUMNS])
    return buffer.getvalue()


def report_node(state: BenchmarkState) -> Dict[str, Any]:
    """
    Compare the echo configurations.

    Writes <out_dir>/benchmark.json and benchmark.csv. The ordering flags
    check that validation loss and liver MAE fall as echoes are added.
    """
    report_node_start("report")
    out_dir = Path(state["out_dir"])
    try:
        rows = comparison_rows(state.get("runs", []))
        result = BenchmarkReport(
            report_path=str(out_dir / "benchmark.json"),
            rows=rows,
            loss_decreases_with_echoes=_strictly_decreasing([r.get("final_val_loss", 0.0) for r in rows]),
            mae_decreases_with_echoes=_strictly_decreasing([r.get("liver_mae", 0.0) for r in rows]),
        )
        atomic_write_json(out_dir / "benchmark.json", {
            "job_id": state.get("job_id"),
            "request": state.get("request", {}),
            "reference": state.get("reference", {}),
            **result,
        })
        atomic_write_text(out_dir / "benchmark.csv", rows_to_csv(rows))
        report_node_complete("report", f"{len(rows)} configurations")
        return {"report": result, **update_node_history(state, "report")}
    except Exception as e:
        return {
            **update_node_history(state, "report"),
            **add_error(state, "report", e, recoverable=False),
        }


def error_report_node(state: BenchmarkState) -> Dict[str, Any]:
    """Write <out_dir>/errors.json for a failed run."""
    errors = state.get("errors", [])
    for error in errors:
        report(f"Error in {error.get('node')}: {error.get('error_type')}: {error.get('message')}")
    try:
        atomic_write_json(Path(state["out_dir"]) / "errors.json", {"job_id": state.get("job_id"), "errors": errors})
    except Exception as e:
        report(f"Could not write error report: {e}")
    return update_node_history(state, "error_report")

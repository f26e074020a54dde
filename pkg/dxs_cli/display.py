"""
Rich console output utilities for CLI.
"""

from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Sequence

from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table
from rich.tree import Tree

console = Console()


def _pp(value: float) -> str:
    """Fraction as percentage points."""
    return f"{100.0 * value:.2f}"


def display_manifest(manifest, out_dir: Path):
    """
    Display a generated dataset.

    Args:
        manifest: DatasetManifest
        out_dir: Dataset root
    """
    fatty = [s for s in manifest.subjects if s.fatty]
    console.print(Panel(
        f"[bold]Subjects:[/bold] {len(manifest.subjects)} ({len(fatty)} fatty livers)\n"
        f"[bold]Master seed:[/bold] {manifest.master_seed}\n"
        f"[bold]Directory:[/bold] {out_dir}",
        title="[green]Dataset[/green]",
    ))


def display_reference_summary(summary: Dict[str, Any]):
    table = Table(title=f"Reference separation ({summary.get('method', '')})")
    table.add_column("Subject", style="cyan")
    table.add_column("FF MAE [pp]", justify="right")
    table.add_column("Background", justify="right")
    table.add_column("Not converged", justify="right")

    for subject in summary.get("subjects", []):
        table.add_row(
            subject.get("subject_id", "?"),
            _pp(subject.get("ff_mae", float("nan"))),
            str(subject.get("background_voxels", 0)),
            str(subject.get("not_converged_voxels", 0)),
        )

    console.print(table)
    console.print(f"[bold]Mean FF MAE:[/bold] {summary.get('mean_ff_mae', float('nan')):.5f} "
                  f"(max {summary.get('max_ff_mae', float('nan')):.5f})")


def display_crossval(result):
    """
    Display per-fold training results.

    Args:
        result: CrossValResult
    """
    table = Table(title="Cross-validation")
    table.add_column("Fold", style="cyan", justify="right")
    table.add_column("Train slices", justify="right")
    table.add_column("Val slices", justify="right")
    table.add_column("Excluded", justify="right")
    table.add_column("Final train loss", justify="right")
    table.add_column("Final val loss", justify="right", style="green")
    table.add_column("Time [s]", justify="right")

    for fold in result.folds:
        table.add_row(
            f"{fold.fold_index + 1}/{fold.k}",
            str(fold.n_train_slices),
            str(fold.n_val_slices),
            str(sum(len(v) for v in fold.excluded.values())),
            f"{fold.final_train_loss:.6f}",
            f"{fold.final_val_loss:.6f}",
            f"{fold.train_seconds:.1f}",
        )

    console.print(table)
    console.print(f"[bold]Mean final validation loss:[/bold] {result.mean_final_val_loss:.6f}")
    console.print(f"[bold]Output:[/bold] {result.out_dir}")


def display_liver_report(report):
    """
    Display liver FF agreement and cutoff classification.

    Args:
        report: LiverReport
    """
    table = Table(title=f"Liver FF {report.label}".strip())
    table.add_column("Subject", style="cyan")
    table.add_column("Reference [%]", justify="right")
    table.add_column("Predicted [%]", justify="right")
    table.add_column("Error [pp]", justify="right")
    table.add_column("Class", justify="center")

    for e in report.entries:
        wrong = e.reference_class != e.predicted_class
        label = f"[red]{e.reference_class}->{e.predicted_class}[/red]" if wrong else e.reference_class
        table.add_row(e.subject_id, _pp(e.reference_ff), _pp(e.predicted_ff), f"{100.0 * e.signed_error:+.2f}", label)

    console.print(table)
    console.print(Panel(
        f"[bold]MAE:[/bold] {_pp(report.mae)} pp\n"
        f"[bold]Bias:[/bold] {100.0 * report.bias:+.2f} pp\n"
        f"[bold]Normal as fatty:[/bold] {report.normal_as_fatty} of {report.n_normal}\n"
        f"[bold]Fatty as normal:[/bold] {report.fatty_as_normal} of {report.n_fatty}\n"
        f"[bold]Cutoff:[/bold] {_pp(report.cutoff)}%",
        title="[blue]Summary[/blue]",
    ))


def display_gradcheck(results: Sequence, tolerance: float):
    table = Table(title=f"Gradient check (tolerance {tolerance:g})")
    table.add_column("Case", style="cyan")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Coords", justify="right")
    table.add_column("Skipped", justify="right")
    table.add_column("Status")

    for r in results:
        status = "[green]OK[/green]" if r.passed else "[red]FAIL[/red]"
        table.add_row(r.name, f"{r.max_relative_error:.3e}", str(r.report.checked), str(r.report.skipped), status)

    console.print(table)
    worst = max((r.max_relative_error for r in results), default=0.0)
    console.print(f"[bold]Max relative error:[/bold] {worst:.3e}")


def display_progress_event(event: Dict[str, Any]):
    """Print one progress event with its time of day."""
    stamp = datetime.fromtimestamp(event.get("ts", 0.0)).strftime("%H:%M:%S")
    style = {"epoch": "cyan", "task": "magenta", "run": "bold"}.get(event.get("kind", ""), "white")
    if event.get("status") == "failed":
        style = "red"
    console.print(f"[dim]{stamp}[/dim] [{style}]{escape(event.get('msg', ''))}[/{style}]")


def display_errors(errors: List[Dict[str, Any]]):
    error_table = Table(title="[red]Errors[/red]")
    error_table.add_column("Node", style="yellow")
    error_table.add_column("Type", style="red")
    error_table.add_column("Message", style="white")
    error_table.add_column("Recoverable", style="green")

    for error in errors:
        error_table.add_row(
            error.get("node", "unknown"),
            error.get("error_type", "unknown"),
            error.get("message", "")[:80],
            str(error.get("recoverable", False)),
        )

    console.print(error_table)


def display_benchmark_result(result: Dict[str, Any], verbose: bool = False):
    """
    Display the final benchmark pipeline state.

    Args:
        result: Final BenchmarkState
        verbose: Also show the node history
    """
    report = result.get("report", {})
    errors = result.get("errors", [])
    history = result.get("node_history", [])
    reference = result.get("reference", {})

    if reference:
        console.print(f"[bold]Reference FF MAE:[/bold] {reference.get('mean_ff_mae', float('nan')):.5f}")

    rows = report.get("rows", [])
    if rows:
        table = Table(title="Echo configurations")
        table.add_column("Echoes", style="cyan")
        table.add_column("Val loss", justify="right", style="green")
        table.add_column("Liver MAE [pp]", justify="right")
        table.add_column("Bias [pp]", justify="right")
        table.add_column("N->F", justify="right")
        table.add_column("F->N", justify="right")

        for row in rows:
            table.add_row(
                row.get("echoes", "?"),
                f"{row.get('final_val_loss', float('nan')):.6f}",
                _pp(row.get("liver_mae", float("nan"))),
                f"{100.0 * row.get('liver_bias', float('nan')):+.2f}",
                str(row.get("normal_as_fatty", "")),
                str(row.get("fatty_as_normal", "")),
            )
        console.print(table)
        console.print(f"[bold]Loss falls with echoes:[/bold] {report.get('loss_decreases_with_echoes')}")
        console.print(f"[bold]Liver MAE falls with echoes:[/bold] {report.get('mae_decreases_with_echoes')}")
        console.print(f"[bold]Report:[/bold] {report.get('report_path')}")

    if errors:
        display_errors(errors)

    if verbose and history:
        tree = Tree("[bold]Node History[/bold]")
        for i, node in enumerate(history):
            tree.add(f"[{i + 1}] {node}")
        console.print(tree)

    console.print()
    status = "[green]Success[/green]" if not errors else "[red]Failed[/red]"
    console.print(f"[bold]Status:[/bold] {status}")
    console.print(f"[bold]Nodes visited:[/bold] {len(history)}")

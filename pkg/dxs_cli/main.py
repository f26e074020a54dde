"""
dxs command-line interface.

Generates phantom cohorts, runs the reference separation, trains and
evaluates the U-Net, checks gradients and runs the full benchmark.
"""

import logging
import os
import sys
import uuid
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from dxs_graph.config import OutputPaths
from dxs_graph.errors import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, ConfigError, DxsError

app = typer.Typer(
    name="dxs",
    help="Dixon water-fat separation with a U-Net - phantom benchmark toolkit",
    add_completion=False,
)

console = Console()


# =============================================================================
# Helpers
# =============================================================================

@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Show debug logging"),
):
    """Dixon water-fat separation with a U-Net."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=verbose)],
        force=True,
    )


@contextmanager
def handle_errors() -> Iterator[None]:
    """Turn library errors into a message and the error's exit code."""
    try:
        yield
    except DxsError as e:
        console.print(f"[red]{type(e).__name__}:[/red] {e}")
        raise typer.Exit(e.exit_code)
    except ValidationError as e:
        console.print(f"[red]Invalid option:[/red] {e}")
        raise typer.Exit(EXIT_USAGE)


def _load_config(config: Optional[Path]):
    from dxs_core.run_config import load_run_config

    return load_run_config(config)


def parse_echoes(text: str, n_echoes: int) -> str:
    """
    Normalize an echo option to 'family:count'.

    Accepts 'all:5' / 'odd:3' / 'even:2' or an explicit index list '1,3,5'.
    """
    from dxs_core.signal_model import EchoSubset, validate_echo_subset

    if "," in text or text.strip().isdigit():
        try:
            indices = [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise ConfigError(f"invalid echo list '{text}'") from None
        return validate_echo_subset(indices, n_echoes).label
    return EchoSubset.parse(text).validate(n_echoes).label


def _spinner(description: str):
    progress = Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
        transient=True,
    )
    progress.add_task(description, total=None)
    return progress


# =============================================================================
# Commands
# =============================================================================

@app.command()
def phantom(
    out: Optional[Path] = typer.Option(None, "--out", "-o",
                                       help="Dataset output directory [default: $DXS_OUTPUT_DIR/dataset]"),
    n: int = typer.Option(60, "--n", help="Number of subjects"),
    seed: int = typer.Option(0, "--seed", help="Master seed"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (TOML)"),
):
    """
    Generate a phantom cohort.

    Examples:
        dxs phantom --n 60 --seed 7 --out data/
    """
    from dxs_core.phantom import generate_dataset
    from dxs_cli.display import display_manifest

    out = OutputPaths.resolve(out, OutputPaths.DATASET)
    with handle_errors():
        cfg = _load_config(config)
        with _spinner(f"Generating {n} subjects..."):
            manifest = generate_dataset(n, seed, cfg.phantom_config(), out)

    display_manifest(manifest, out)


@app.command()
def reference(
    dataset: Path = typer.Argument(..., help="Dataset directory"),
    out: Optional[Path] = typer.Option(None, "--out", "-o",
                                       help="Reference output directory [default: $DXS_OUTPUT_DIR/reference]"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (TOML)"),
):
    """
    Reference separation of every subject; prints FF MAE against phantom truth.

    Examples:
        dxs reference data/ --out ref/
    """
    from dxs_compute.manager import separate_dispatcher
    from dxs_core.reference import run_reference
    from dxs_graph.config import is_local_compute
    from dxs_cli.display import display_reference_summary

    out = OutputPaths.resolve(out, OutputPaths.REFERENCE)
    with handle_errors():
        cfg = _load_config(config)
        dispatch = None
        if not is_local_compute():
            dispatch = separate_dispatcher(dataset, out, cfg.reference.model_dump(), cfg.fat_spectrum.model_dump())
        with _spinner("Separating subjects..."):
            summary = run_reference(dataset, out, cfg.reference, cfg.fat_spectrum, dispatch=dispatch)

    display_reference_summary(summary)


@app.command()
def train(
    dataset: Path = typer.Argument(..., help="Dataset directory"),
    out: Optional[Path] = typer.Option(None, "--out", "-o",
                                       help="Training output directory [default: $DXS_OUTPUT_DIR/training]"),
    echoes: Optional[str] = typer.Option(None, "--echoes", "-e",
                                         help="Echo subset: all:K, odd:K, even:K or a list like 1,3,5"),
    reference_dir: Optional[Path] = typer.Option(None, "--reference", "-r",
                                                 help="Reference separations (training target)"),
    target: Optional[str] = typer.Option(None, "--target", help="Training target: reference or truth"),
    fold: Optional[int] = typer.Option(None, "--fold", help="Train only this fold"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override the epoch count"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (TOML)"),
):
    """
    Cross-validated U-Net training: per-fold checkpoints, loss curves and pooled predictions.

    Examples:
        dxs train data/ --reference ref/ --echoes odd:3 --out runs/odd-3
        dxs train data/ --target truth --echoes all:5 --fold 0 --out runs/all-5
    """
    from dxs_compute.manager import fold_dispatcher
    from dxs_core.training import TrainingData, run_crossval
    from dxs_graph.config import is_local_compute
    from dxs_cli.display import display_crossval

    out = OutputPaths.resolve(out, OutputPaths.TRAINING)
    with handle_errors():
        cfg = _load_config(config)
        updates = {}
        if echoes is not None:
            updates["echoes"] = parse_echoes(echoes, cfg.acquisition.n_echoes)
        if target is not None:
            if target not in ("reference", "truth"):
                raise ConfigError(f"--target must be 'reference' or 'truth', got {target!r}")
            updates["target"] = target
        if fold is not None:
            updates["fold"] = fold
        if epochs is not None:
            updates["epochs"] = epochs
        train_cfg = cfg.training.model_validate({**cfg.training.model_dump(), **updates})
        spec = cfg.network_spec(train_cfg.echoes)

        data = TrainingData.from_directory(
            dataset, train_cfg.echoes, spec.depth,
            reference_dir=reference_dir,
            target=train_cfg.target,
            min_fraction=train_cfg.empty_slice_fraction,
            bins=cfg.evaluation.histogram_bins,
        )
        dispatch = None
        if not is_local_compute():
            dispatch = fold_dispatcher(dataset, reference_dir, out, train_cfg.model_dump(), spec.model_dump())

        console.print(Panel(
            f"[bold]Echoes:[/bold] {train_cfg.echoes} ({spec.in_channels} input channels)\n"
            f"[bold]Target:[/bold] {train_cfg.target}\n"
            f"[bold]Folds:[/bold] {train_cfg.fold if train_cfg.fold is not None else f'all {train_cfg.k_folds}'}",
            title="Training",
        ))
        with _spinner("Training..."):
            result = run_crossval(data, spec, train_cfg, out, dispatch=dispatch)

    display_crossval(result)


@app.command("eval")
def evaluate(
    predictions: Path = typer.Argument(..., help="Training output directory holding predictions/"),
    dataset: Path = typer.Argument(..., help="Dataset directory"),
    out: Optional[Path] = typer.Option(None, "--out", "-o",
                                       help="Report output directory [default: $DXS_OUTPUT_DIR/evaluation]"),
    against: str = typer.Option("truth", "--against", help="Compare with: truth or reference"),
    reference_dir: Optional[Path] = typer.Option(None, "--reference", "-r", help="Reference separations"),
    echoes: Optional[str] = typer.Option(None, "--echoes", "-e",
                                         help="Echo subset for water/fat images (defaults to the training run's)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (TOML)"),
):
    """
    Liver FF report, PNG exports and scatter data for pooled predictions.

    Examples:
        dxs eval runs/all-5 data/ --out eval/all-5
    """
    from dxs_core.evaluation import evaluate_predictions
    from dxs_core.tensorfile import read_json
    from dxs_cli.display import display_liver_report

    out = OutputPaths.resolve(out, OutputPaths.EVALUATION)
    if against not in ("truth", "reference"):
        console.print("[red]--against must be 'truth' or 'reference'[/red]")
        raise typer.Exit(EXIT_USAGE)

    with handle_errors():
        cfg = _load_config(config)
        if echoes is None:
            crossval_path = predictions / "crossval.json"
            echoes = read_json(crossval_path).get("echoes") if crossval_path.exists() else cfg.training.echoes
        echoes = parse_echoes(echoes, cfg.acquisition.n_echoes)
        with _spinner("Evaluating..."):
            report = evaluate_predictions(
                predictions, dataset, out,
                cfg=cfg.evaluation,
                reference_dir=reference_dir,
                against=against,
                echoes=echoes,
                spectrum=cfg.fat_spectrum,
                label=echoes,
            )

    display_liver_report(report)


@app.command()
def gradcheck(
    precision: str = typer.Option("float64", "--precision", help="Requested precision (checks always use float64)"),
    inject_fault: bool = typer.Option(False, "--inject-fault", help="Scale analytic gradients by 1.01"),
    seed: int = typer.Option(0, "--seed", help="Input seed"),
):
    """
    Finite-difference check of every autodiff op and a depth-2 U-Net.

    Exits nonzero when any case exceeds the tolerance.
    """
    from dxs_core.gradcheck import GRADCHECK_TOLERANCE, run_gradient_suite
    from dxs_cli.display import display_gradcheck

    if precision != "float64":
        console.print(f"[yellow]Warning:[/yellow] gradient checks run in float64; ignoring --precision {precision}")

    with handle_errors():
        with _spinner("Checking gradients..."):
            results = run_gradient_suite(grad_scale=1.01 if inject_fault else 1.0, seed=seed)

    display_gradcheck(results, GRADCHECK_TOLERANCE)
    if not all(r.passed for r in results):
        raise typer.Exit(EXIT_NUMERIC)


@app.command()
def benchmark(
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Benchmark output root [default: $DXS_OUTPUT_DIR]"),
    n: int = typer.Option(60, "--n", help="Number of subjects"),
    seed: int = typer.Option(0, "--seed", help="Master seed"),
    echoes: Optional[List[str]] = typer.Option(None, "--echoes", "-e",
                                               help="Echo subset to compare (repeatable; default all:1, odd:3, all:5)"),
    fold: int = typer.Option(0, "--fold", help="Fold to train"),
    all_folds: bool = typer.Option(False, "--all-folds", help="Full cross-validation instead of one fold"),
    target: str = typer.Option("reference", "--target", help="Training target: reference or truth"),
    against: str = typer.Option("truth", "--against", help="Evaluation target: truth or reference"),
    fresh: bool = typer.Option(False, "--fresh", help="Regenerate dataset and reference even if present"),
    job_id: Optional[str] = typer.Option(None, "--job-id", help="Run id for `dxs logs` (generated if omitted)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (TOML)"),
):
    """
    Run the full pipeline: phantom -> reference -> training -> evaluation -> report.

    Examples:
        dxs benchmark --out bench/ --n 60 --echoes all:1 --echoes odd:3 --echoes all:5
    """
    from dxs_graph.graph import run_benchmark
    from dxs_graph.state.factory import get_exit_code
    from dxs_cli.display import display_benchmark_result

    out = OutputPaths.resolve(out)
    with handle_errors():
        cfg = _load_config(config)
        if n < 1:
            raise ConfigError(f"--n must be >= 1, got {n}")
        echo_configs = [parse_echoes(e, cfg.acquisition.n_echoes) for e in echoes] if echoes else None
    job_id = job_id or uuid.uuid4().hex[:8]

    console.print(Panel(
        f"[bold]Output:[/bold] {out}\n[bold]Subjects:[/bold] {n}\n"
        f"[bold]Job:[/bold] {job_id} (follow with: dxs logs {job_id} -f)",
        title="Benchmark",
    ))
    with _spinner("Running benchmark pipeline..."):
        result = run_benchmark(
            out_dir=str(out),
            run_config=cfg.model_dump(mode="json"),
            n_subjects=n,
            master_seed=seed,
            echo_configs=echo_configs,
            fold=None if all_folds else fold,
            target=target,
            against=against,
            reuse_dataset=not fresh,
            job_id=job_id,
        )

    display_benchmark_result(result)
    code = get_exit_code(result)
    if code:
        raise typer.Exit(code)


@app.command()
def logs(
    job_id: str = typer.Argument(..., help="Run id printed by `dxs benchmark`"),
    follow: bool = typer.Option(False, "--follow", "-f", help="Keep reading until the run finishes"),
    poll: float = typer.Option(1.0, "--poll", help="Seconds between reads when following"),
    idle_timeout: Optional[float] = typer.Option(None, "--idle-timeout",
                                                 help="Stop following after this many quiet seconds"),
):
    """
    Print the progress events of a benchmark run.

    Examples:
        dxs logs 3f9a2c1e --follow
    """
    from dxs_graph.utils import live_logger
    from dxs_cli.display import display_progress_event

    if follow:
        events = live_logger.follow(job_id, poll_interval=poll, idle_timeout=idle_timeout)
    else:
        events, _ = live_logger.read_events(job_id)
        if not events:
            console.print(f"[yellow]No progress events for {job_id}[/yellow]")
    for event in events:
        display_progress_event(event)


@app.command()
def version():
    """Show version information."""
    from dxs_graph import __version__

    console.print(f"dxs-unet version: [bold]{__version__}[/bold]")


@app.command()
def check(
    services: bool = typer.Option(False, "--services", help="Also probe Redis and the Celery compute workers"),
):
    """Check environment and dependencies."""
    from dxs_graph.config import get_worker_count, is_local_compute

    console.print(Panel("Environment Check", title="dxs"))

    checks = []

    py_version = f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}"
    checks.append(("Python", py_version, sys.version_info >= (3, 11)))

    packages = ["numpy", "PIL", "pydantic", "langgraph", "celery", "redis", "typer", "rich"]
    for pkg in packages:
        try:
            __import__(pkg)
            checks.append((pkg, "installed", True))
        except ImportError:
            checks.append((pkg, "missing", False))

    checks.append(("workers", str(get_worker_count()), True))
    checks.append(("compute", "local" if is_local_compute() else "celery", True))
    checks.append(("output root", str(OutputPaths.root()), True))
    for var in ["CELERY_BROKER_URL", "REDIS_HOST"]:
        value = os.environ.get(var, "not set")
        checks.append((f"${var}", value[:30], True))

    table = Table(title="Environment Status")
    table.add_column("Check", style="cyan")
    table.add_column("Value", style="white")
    table.add_column("Status", style="green")

    for name, value, ok in checks:
        status = "[green]OK[/green]" if ok else "[red]FAIL[/red]"
        table.add_row(name, str(value), status)

    console.print(table)

    if services:
        from dxs_compute.health import probe_services

        probes = probe_services()
        service_table = Table(title="Services")
        service_table.add_column("Service", style="cyan")
        service_table.add_column("Detail", style="white")
        service_table.add_column("Status")
        for probe in probes:
            status = "[green]OK[/green]" if probe.ok else "[red]FAIL[/red]"
            service_table.add_row(probe.name, probe.detail[:60], status)
        console.print(service_table)
        if not all(p.ok for p in probes):
            raise typer.Exit(EXIT_DATA)


if __name__ == "__main__":
    app()

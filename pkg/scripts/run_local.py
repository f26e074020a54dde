#!/usr/bin/env python3
"""
Run a small benchmark in-process.

Generates a tiny cohort, separates it, trains one fold per echo
configuration and prints the comparison. Useful for checking an install
without Celery workers.

Usage:
    python scripts/run_local.py --out /tmp/dxs-bench
    python scripts/run_local.py --out /tmp/dxs-bench --n 10 --epochs 2 --echoes all:1 --echoes all:5
"""

import os
import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# Run compute tasks in this process
os.environ["DXS_LOCAL_COMPUTE"] = "true"


def main():
    import argparse
    from rich.console import Console
    from rich.panel import Panel

    from dxs_core.run_config import parse_run_config
    from dxs_graph.graph import run_benchmark
    from dxs_cli.display import display_benchmark_result

    parser = argparse.ArgumentParser(description="Run a small dxs benchmark locally")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--n", type=int, default=10, help="Number of subjects")
    parser.add_argument("--size", type=int, default=32, help="In-plane matrix size")
    parser.add_argument("--slices", type=int, default=4, help="Slices per subject")
    parser.add_argument("--epochs", type=int, default=2, help="Training epochs")
    parser.add_argument("--echoes", action="append", help="Echo subset (repeatable)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Show node history")

    args = parser.parse_args()

    console = Console()

    cfg = parse_run_config({
        "phantom": {"height": args.size, "width": args.size, "slices": args.slices},
        "network": {"depth": 2, "base_features": 4},
        "training": {"epochs": args.epochs, "k_folds": 5},
    }, "<run_local>")

    console.print(Panel(
        f"[bold]Subjects:[/bold] {args.n} ({args.size}x{args.size}x{args.slices})\n"
        f"[bold]Epochs:[/bold] {args.epochs}\n"
        f"[bold]Mode:[/bold] local compute",
        title="dxs benchmark",
    ))

    result = run_benchmark(
        out_dir=args.out,
        run_config=cfg.model_dump(mode="json"),
        n_subjects=args.n,
        echo_configs=args.echoes,
        target="truth",
    )

    display_benchmark_result(result, verbose=args.verbose)


if __name__ == "__main__":
    main()

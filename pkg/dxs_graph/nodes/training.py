"""
Training and evaluation nodes for the benchmark pipeline.

Each pass through training -> evaluation handles the first pending echo
configuration.
"""

from pathlib import Path
from typing import Any, Dict

from dxs_compute.manager import fold_dispatcher
from dxs_core.evaluation import evaluate_predictions
from dxs_core.run_config import parse_run_config
from dxs_core.signal_model import EchoSubset
from dxs_core.training import TrainingData, run_crossval
from dxs_graph.state.factory import add_error, update_node_history
from dxs_graph.state.schema import BenchmarkState, ConfigRun
from dxs_graph.utils.live_logger import report_node_complete, report_node_error, report_node_start


def config_label(echoes: str) -> str:
    """Directory-safe label for an echo subset ("odd:3" -> "odd-3")."""
    return echoes.replace(":", "-")


def training_node(state: BenchmarkState) -> Dict[str, Any]:
    """Cross-validated training for the next pending echo configuration."""
    pending = list(state.get("pending_configs", []))
    if not pending:
        return update_node_history(state, "training")

    echoes = pending[0]
    report_node_start("training", echoes)
    request = state.get("request", {})
    dataset_dir = state.get("dataset", {}).get("dataset_dir")
    reference_dir = state.get("reference", {}).get("reference_dir")
    train_dir = Path(state["out_dir"]) / "training" / config_label(echoes)

    try:
        cfg = parse_run_config(state.get("run_config", {}))
        train_cfg = cfg.training.model_copy(update={
            "echoes": echoes,
            "fold": request.get("fold"),
            "target": request.get("target", cfg.training.target),
        })
        spec = cfg.network_spec(echoes)
        data = TrainingData.from_directory(
            dataset_dir, echoes, spec.depth,
            reference_dir=reference_dir,
            target=train_cfg.target,
            min_fraction=train_cfg.empty_slice_fraction,
        )
        dispatch = fold_dispatcher(dataset_dir, reference_dir, train_dir, train_cfg.model_dump(), spec.model_dump())
        result = run_crossval(data, spec, train_cfg, train_dir, dispatch=dispatch)

        run = ConfigRun(
            echoes=echoes,
            n_echoes=len(EchoSubset.parse(echoes).indices),
            train_dir=str(train_dir),
            folds=[f.fold_index for f in result.folds],
            final_train_loss=sum(f.final_train_loss for f in result.folds) / len(result.folds),
            final_val_loss=result.mean_final_val_loss,
            train_seconds=sum(f.train_seconds for f in result.folds),
        )
        report_node_complete("training", f"{echoes}: validation loss {run['final_val_loss']:.6f}")
        return {
            "pending_configs": pending[1:],
            "current_run": run,
            **update_node_history(state, "training"),
        }
    except Exception as e:
        report_node_error("training", str(e))
        return {
            **update_node_history(state, "training"),
            **add_error(state, "training", e, recoverable=False),
        }


def evaluation_node(state: BenchmarkState) -> Dict[str, Any]:
    """Liver metrics and image exports for the configuration just trained."""
    run = dict(state.get("current_run", {}))
    report_node_start("evaluation", run.get("echoes", ""))
    request = state.get("request", {})
    eval_dir = Path(state["out_dir"]) / "evaluation" / config_label(run.get("echoes", "unknown"))

    try:
        cfg = parse_run_config(state.get("run_config", {}))
        liver = evaluate_predictions(
            run["train_dir"],
            state["dataset"]["dataset_dir"],
            eval_dir,
            cfg=cfg.evaluation,
            reference_dir=state.get("reference", {}).get("reference_dir"),
            against=request.get("against", "truth"),
            echoes=run["echoes"],
            spectrum=cfg.fat_spectrum,
            label=run["echoes"],
        )
        run.update(
            eval_dir=str(eval_dir),
            liver_mae=liver.mae,
            liver_bias=liver.bias,
            voxel_mae=liver.extra.get("voxel_mae", float("nan")),
            normal_as_fatty=liver.normal_as_fatty,
            fatty_as_normal=liver.fatty_as_normal,
        )
        runs = list(state.get("runs", []))
        runs.append(ConfigRun(**run))
        report_node_complete("evaluation", f"{run['echoes']}: liver MAE {liver.mae:.4f}")
        return {
            "runs": runs,
            "current_run": ConfigRun(),
            **update_node_history(state, "evaluation"),
        }
    except Exception as e:
        report_node_error("evaluation", str(e))
        return {
            **update_node_history(state, "evaluation"),
            **add_error(state, "evaluation", e, recoverable=False),
        }

"""
Integration tests for the benchmark pipeline.
"""

import json
from pathlib import Path

import pytest

from dxs_graph.graph import run_benchmark
from dxs_graph.state.factory import get_exit_code


@pytest.mark.integration
class TestBenchmarkPipeline:
    """End-to-end runs of the LangGraph pipeline on a tiny cohort."""

    def test_two_configurations(self, tmp_path, tiny_run_config):
        """Both configurations are trained, evaluated and compared."""
        result = run_benchmark(
            out_dir=str(tmp_path),
            run_config=tiny_run_config,
            n_subjects=4,
            master_seed=1,
            echo_configs=["all:1", "odd:3"],
            fold=0,
            target="truth",
            job_id="bench-1",
        )

        assert get_exit_code(result) == 0, result["errors"]
        assert result["node_history"] == [
            "dataset", "reference", "training", "evaluation", "training", "evaluation", "report",
        ]
        assert [r["echoes"] for r in result["runs"]] == ["all:1", "odd:3"]
        assert result["pending_configs"] == []

        payload = json.loads((tmp_path / "benchmark.json").read_text())
        assert payload["job_id"] == "bench-1"
        assert [row["n_echoes"] for row in payload["rows"]] == [1, 3]
        for label in ("all-1", "odd-3"):
            assert (tmp_path / "training" / label / "crossval.json").is_file()
            assert (tmp_path / "evaluation" / label / "liver_report.json").is_file()
        assert (tmp_path / "reference" / "summary.json").is_file()

    def test_reference_target(self, tmp_path, tiny_run_config):
        """Training on reference maps uses the reference stage's output."""
        result = run_benchmark(
            out_dir=str(tmp_path),
            run_config=tiny_run_config,
            n_subjects=4,
            echo_configs=["all:5"],
            target="reference",
        )
        assert get_exit_code(result) == 0, result["errors"]
        assert result["reference"]["reference_dir"] == str(tmp_path / "reference")
        assert result["runs"][0]["n_echoes"] == 5

    def test_reuse_between_runs(self, tmp_path, tiny_run_config):
        """A second run over the same output root reuses the dataset."""
        kwargs = dict(out_dir=str(tmp_path), run_config=tiny_run_config, n_subjects=4,
                      echo_configs=["all:1"], target="truth")
        run_benchmark(**kwargs)
        assert run_benchmark(**kwargs)["dataset"]["reused"] is True
        assert run_benchmark(**kwargs, reuse_dataset=False)["dataset"]["reused"] is False

    def test_invalid_config_stops_pipeline(self, tmp_path):
        """A bad run configuration routes straight to the error report."""
        result = run_benchmark(
            out_dir=str(tmp_path),
            run_config={"training": {"epochz": 1}},
            n_subjects=2,
            echo_configs=["all:1"],
        )
        assert get_exit_code(result) == 1
        assert result["node_history"] == ["dataset", "error_report"]
        errors = json.loads((Path(tmp_path) / "errors.json").read_text())["errors"]
        assert errors[0]["node"] == "dataset"
        assert not (tmp_path / "benchmark.json").exists()

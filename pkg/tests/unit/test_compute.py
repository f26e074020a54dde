"""
Unit tests for compute dispatch, process settings and live logging.
"""

import contextvars
import json
import threading
from types import SimpleNamespace

import pytest
import redis
from celery.result import AsyncResult

from dxs_compute.health import probe_compute_workers, probe_progress_channel, probe_redis
from dxs_compute.manager import (
    ComputeTaskManager,
    ComputeTaskResult,
    TaskStatus,
    fold_dispatcher,
    separate_dispatcher,
)
from dxs_compute.pool import WorkerPool
from dxs_compute.tasks import call_separate_subject, call_train_fold
from dxs_graph.config import OutputPaths, get_worker_count, is_local_compute, run_slow_tests
from dxs_graph.errors import ComputeTaskError
from dxs_graph.utils import live_logger


@pytest.mark.unit
class TestWorkerPool:
    """Tests for the ordered worker pool."""

    def test_inline_by_default(self):
        """DXS_THREADS=1 runs work in the calling thread."""
        pool = WorkerPool()
        assert pool.inline
        assert pool.map(lambda _: threading.get_ident(), range(3)) == [threading.get_ident()] * 3

    def test_results_keep_input_order(self):
        """Parallel maps return results in submission order."""
        assert WorkerPool(4).map(lambda x: x * x, range(10)) == [x * x for x in range(10)]

    def test_exceptions_propagate(self):
        """A failing item re-raises in the caller."""
        def work(x):
            if x == 2:
                raise ValueError("bad item")
            return x

        with pytest.raises(ValueError):
            WorkerPool(3).map(work, range(5))

    def test_context_is_copied(self):
        """Context variables set by the caller are visible in workers."""
        var = contextvars.ContextVar("run", default=None)
        var.set("job-7")
        assert WorkerPool(2).map(lambda _: var.get(), range(4)) == ["job-7"] * 4


@pytest.mark.unit
class TestSettings:
    """Tests for environment-driven settings."""

    @pytest.mark.parametrize("raw,expected", [("4", 4), ("0", 1), ("many", 1)])
    def test_worker_count(self, monkeypatch, raw, expected):
        """DXS_THREADS is parsed leniently and never below one."""
        monkeypatch.setenv("DXS_THREADS", raw)
        assert get_worker_count() == expected

    def test_flags(self, monkeypatch):
        """Local compute is on and slow tests are off unless requested."""
        monkeypatch.delenv("DXS_RUN_SLOW", raising=False)
        assert is_local_compute()
        assert not run_slow_tests()
        monkeypatch.setenv("DXS_LOCAL_COMPUTE", "false")
        assert not is_local_compute()

    def test_output_paths(self, monkeypatch, tmp_path):
        """Defaults sit below DXS_OUTPUT_DIR; an explicit directory wins."""
        monkeypatch.setenv("DXS_OUTPUT_DIR", str(tmp_path))
        assert OutputPaths.resolve(None, OutputPaths.REFERENCE) == tmp_path / "reference"
        assert OutputPaths.resolve(None) == tmp_path
        assert OutputPaths.resolve(tmp_path / "mine", OutputPaths.TRAINING) == tmp_path / "mine"
        monkeypatch.delenv("DXS_OUTPUT_DIR")
        assert OutputPaths.root().name == "dxs_outputs"


@pytest.mark.unit
class TestTaskProxies:
    """Tests for the Celery task proxies."""

    def test_local_train_fold(self, mocker):
        """Local mode runs the job in-process and returns its summary."""
        job = mocker.patch("dxs_core.training.train_fold_job", return_value={"fold_index": 1})
        assert call_train_fold("ds", None, "out", {}, {}, 1) == {"fold_index": 1}
        job.assert_called_once_with("ds", None, "out", {}, {}, 1)

    def test_remote_separate_subject(self, mocker, monkeypatch):
        """Remote mode submits the task with the job id."""
        monkeypatch.setenv("DXS_LOCAL_COMPUTE", "false")
        task = mocker.patch("dxs_compute.tasks._separate_subject_task")
        call_separate_subject("ds", "ref", {"grid_size": 64}, None, "subj-001", "job-3")
        task.delay.assert_called_once_with("ds", "ref", {"grid_size": 64}, None, "subj-001", "job-3")


@pytest.mark.unit
class TestComputeTaskManager:
    """Tests for result polling."""

    def _async_result(self, mocker, ready, successful=True, result=None, status="SUCCESS"):
        async_result = mocker.MagicMock(spec=AsyncResult)
        async_result.id = "task-1"
        async_result.ready.side_effect = ready
        async_result.successful.return_value = successful
        async_result.result = result
        async_result.status = status
        return async_result

    def test_direct_result(self):
        """Plain return values complete immediately."""
        result = ComputeTaskManager("t").execute_sync(lambda x: x + 1, args=(1,))
        assert result.status == TaskStatus.SUCCESS
        assert result.result == 2
        assert result.task_id == "direct-result"

    def test_polls_until_ready(self, mocker):
        """The manager waits for ready() and returns the task result."""
        async_result = self._async_result(mocker, [False, False, True], result={"ok": True})
        manager = ComputeTaskManager("t", timeout=60, poll_interval=0)
        result = manager.execute_sync(lambda: async_result)
        assert result.status == TaskStatus.SUCCESS
        assert result.result == {"ok": True}
        assert async_result.ready.call_count == 3

    def test_failure(self, mocker):
        """A failed task reports its exception text."""
        async_result = self._async_result(mocker, [True], successful=False, result=ValueError("boom"),
                                          status="FAILURE")
        result = ComputeTaskManager("t", poll_interval=0).execute_sync(lambda: async_result)
        assert result.status == TaskStatus.FAILURE
        assert result.error == "boom"

    def test_revoked(self, mocker):
        """Revoked tasks are distinguished from failures."""
        async_result = self._async_result(mocker, [True], successful=False, result="terminated",
                                          status="REVOKED")
        result = ComputeTaskManager("t", poll_interval=0).execute_sync(lambda: async_result)
        assert result.status == TaskStatus.REVOKED

    def test_timeout_revokes(self, mocker):
        """Exceeding the timeout revokes the task."""
        async_result = self._async_result(mocker, [False] * 5)
        result = ComputeTaskManager("t", timeout=-1, poll_interval=0).execute_sync(lambda: async_result)
        assert result.status == TaskStatus.TIMEOUT
        async_result.revoke.assert_called_once()

    def test_unwrap(self):
        """unwrap() returns results and raises ComputeTaskError otherwise."""
        assert ComputeTaskResult(TaskStatus.SUCCESS, result=3).unwrap() == 3
        with pytest.raises(ComputeTaskError) as exc:
            ComputeTaskResult(TaskStatus.TIMEOUT, error="late").unwrap("train_fold[0]")
        assert exc.value.status == "timeout"


@pytest.mark.unit
class TestDispatchers:
    """Tests for run_crossval/run_reference dispatch callables."""

    def test_fold_dispatcher(self, mocker):
        """The dispatcher forwards the plan's fold index and unwraps the summary."""
        job = mocker.patch("dxs_core.training.train_fold_job", return_value={"fold_index": 2})
        dispatch = fold_dispatcher("ds", None, "out", {"epochs": 1}, {"depth": 2})
        assert dispatch(SimpleNamespace(fold_index=2)) == {"fold_index": 2}
        job.assert_called_once_with("ds", None, "out", {"epochs": 1}, {"depth": 2}, 2)

    def test_separate_dispatcher(self, mocker):
        """Subjects are separated through the proxy."""
        mocker.patch("dxs_core.reference.separate_subject_job", return_value={"subject_id": "subj-000"})
        dispatch = separate_dispatcher("ds", "ref", {}, None)
        assert dispatch("subj-000") == {"subject_id": "subj-000"}


@pytest.mark.unit
class TestLiveLogger:
    """Tests for Redis-backed progress reporting."""

    def test_offline_redis_is_silent(self):
        """Reporting with Redis down neither raises nor returns events."""
        live_logger.report("hello", job_id="job-1")
        assert live_logger.read_events("job-1") == ([], 0)

    def test_without_job_nothing_is_pushed(self, mocker):
        """Events outside a run only reach the local logger."""
        client = mocker.MagicMock()
        mocker.patch("dxs_graph.utils.live_logger.get_redis", return_value=client)
        live_logger.report("no run")
        client.rpush.assert_not_called()

    def test_epoch_event(self, mocker):
        """Epoch events go to the dxslog:<job> list with their loss fields."""
        client = mocker.MagicMock()
        mocker.patch("dxs_graph.utils.live_logger.get_redis", return_value=client)
        live_logger.set_current_job_id("job-2")
        try:
            live_logger.report_epoch(0, 3, 0.5, 0.25)
        finally:
            live_logger.set_current_job_id(None)
        key, payload = client.rpush.call_args.args
        event = json.loads(payload)
        assert key == "dxslog:job-2"
        assert event["kind"] == "epoch"
        assert (event["fold"], event["epoch"], event["val_loss"]) == (0, 3, 0.25)
        assert event["msg"] == "[fold 0] epoch 3: train=0.500000 val=0.250000"

    def test_read_events_advances_index(self, mocker):
        """read_events returns the new list index for incremental reads."""
        client = mocker.MagicMock()
        client.lrange.return_value = [json.dumps({"kind": "message", "msg": "a"})] * 2
        mocker.patch("dxs_graph.utils.live_logger.get_redis", return_value=client)
        events, index = live_logger.read_events("job-3", since=4)
        assert index == 6
        client.lrange.assert_called_once_with("dxslog:job-3", 4, -1)
        assert events[0]["msg"] == "a"

    def test_follow_stops_at_run_event(self, mocker):
        """Following ends with the run's final event."""
        batches = [
            ([{"kind": "node", "msg": "Starting: dataset"}], 1),
            ([], 1),
            ([{"kind": "run", "msg": "Run succeeded (exit code 0)"}, {"kind": "message", "msg": "late"}], 3),
        ]
        mocker.patch("dxs_graph.utils.live_logger.read_events", side_effect=batches)
        events = list(live_logger.follow("job-4", poll_interval=0))
        assert [e["kind"] for e in events] == ["node", "run"]

    def test_follow_idle_timeout(self, mocker):
        """A quiet run stops the follower after the idle timeout."""
        mocker.patch("dxs_graph.utils.live_logger.read_events", return_value=([], 0))
        assert list(live_logger.follow("job-5", poll_interval=0, idle_timeout=0)) == []


@pytest.mark.unit
class TestServiceProbes:
    """Tests for remote-compute reachability probes."""

    def test_redis_down(self, mocker):
        """A refused connection is reported, not raised."""
        client = mocker.MagicMock()
        client.ping.side_effect = redis.ConnectionError("refused")
        mocker.patch("dxs_compute.health.redis.Redis", return_value=client)
        status = probe_redis()
        assert not status.ok
        assert "refused" in status.detail

    def test_progress_channel_offline(self):
        """The progress probe fails while Redis is unreachable."""
        assert not probe_progress_channel().ok

    def test_compute_workers(self, mocker):
        """Only workers consuming the compute queue count."""
        app = mocker.patch("dxs_compute.health.celery_app")
        app.control.inspect.return_value.active_queues.return_value = {
            "w1@host": [{"name": "compute"}],
            "w2@host": [{"name": "celery"}],
        }
        status = probe_compute_workers()
        assert status.ok
        assert status.detail == "w1@host"

    def test_no_workers(self, mocker):
        """No inspection reply means no workers."""
        app = mocker.patch("dxs_compute.health.celery_app")
        app.control.inspect.return_value.active_queues.return_value = None
        assert not probe_compute_workers().ok

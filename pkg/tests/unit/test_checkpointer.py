"""
Unit tests for parameter checkpointers.
"""

import numpy as np
import pytest

from dxs_checkpointer import FileCheckpointer, MemoryCheckpointer
from dxs_checkpointer.file import DESCRIPTOR_NAME
from dxs_core.unet import build_unet


@pytest.mark.unit
class TestMemoryCheckpointer:
    """Tests for MemoryCheckpointer."""

    def test_put_and_get(self, small_spec):
        """put() returns sequential ids; get() rebuilds equal parameters."""
        checkpointer = MemoryCheckpointer()
        params = build_unet(small_spec, init_seed=1)
        assert checkpointer.put("fold-0", params, {"epochs": 2}) == "checkpoint-1"
        restored = checkpointer.get("fold-0")
        for name in params:
            np.testing.assert_array_equal(restored[name].data, params[name].data)
        assert checkpointer.get_tuple("fold-0").metadata == {"epochs": 2}

    def test_stores_copies(self, small_spec):
        """Later changes to live arrays do not reach the checkpoint."""
        checkpointer = MemoryCheckpointer()
        params = build_unet(small_spec)
        checkpointer.put("fold-0", params)
        params["head.bias"].data[:] = 42.0
        assert checkpointer.get("fold-0")["head.bias"].data[0] == 0.0

    def test_missing_key(self):
        """Unknown keys return None."""
        assert MemoryCheckpointer().get("fold-9") is None

    def test_list_delete_clear(self, small_spec):
        """list() is newest first; delete() and clear() remove entries."""
        checkpointer = MemoryCheckpointer()
        params = build_unet(small_spec)
        checkpointer.put("fold-0", params)
        checkpointer.put("fold-1", params)
        assert len(list(checkpointer.list(limit=1))) == 1
        assert len(checkpointer) == 2
        assert checkpointer.delete("fold-0") is True
        assert checkpointer.delete("fold-0") is False
        checkpointer.clear()
        assert len(checkpointer) == 0


@pytest.mark.unit
class TestFileCheckpointer:
    """Tests for FileCheckpointer."""

    def test_round_trip(self, tmp_path, small_spec):
        """Parameters, spec and metadata survive a write/read cycle."""
        checkpointer = FileCheckpointer(tmp_path)
        params = build_unet(small_spec, init_seed=3)
        checkpoint_id = checkpointer.put("fold-2", params, {"echoes": "odd:3"})
        assert checkpoint_id.startswith("fold-2@")

        entry = checkpointer.get_tuple("fold-2")
        assert entry.checkpoint_id == checkpoint_id
        assert entry.spec == small_spec
        assert entry.metadata == {"echoes": "odd:3"}
        restored = entry.parameters()
        for name in params:
            np.testing.assert_array_equal(restored[name].data, params[name].data)
            assert restored[name].dtype == np.float32

    def test_incomplete_checkpoint_is_ignored(self, tmp_path, small_spec):
        """Without its descriptor a checkpoint directory does not exist."""
        checkpointer = FileCheckpointer(tmp_path)
        checkpointer.put("fold-0", build_unet(small_spec))
        (tmp_path / "fold-0" / DESCRIPTOR_NAME).unlink()
        assert checkpointer.get("fold-0") is None
        assert list(checkpointer.list()) == []

    def test_missing_parameter_file(self, tmp_path, small_spec):
        """A lost tensor file makes the checkpoint unreadable."""
        checkpointer = FileCheckpointer(tmp_path)
        checkpointer.put("fold-0", build_unet(small_spec))
        (tmp_path / "fold-0" / "head.weight.dxt").unlink()
        assert checkpointer.get_tuple("fold-0") is None

    def test_list_missing_root(self, tmp_path):
        """A root that does not exist lists nothing."""
        assert list(FileCheckpointer(tmp_path / "none").list()) == []

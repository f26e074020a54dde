"""
In-memory parameter checkpointer for testing.
"""

import copy
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterator, Optional

import numpy as np

from dxs_core.unet import UNetParameters, UNetSpec


@dataclass
class CheckpointEntry:
    """A single parameter checkpoint."""
    key: str
    checkpoint_id: str
    spec: UNetSpec
    arrays: Dict[str, np.ndarray]
    metadata: Dict[str, Any]
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def parameters(self) -> UNetParameters:
        return UNetParameters.from_arrays(self.spec, {k: v.copy() for k, v in self.arrays.items()})


class MemoryCheckpointer:
    """
    Dictionary-backed checkpointer.

    Stores copies of the parameter arrays, so later updates to the live
    parameters never leak into a stored checkpoint.
    """

    def __init__(self):
        self._checkpoints: Dict[str, CheckpointEntry] = {}
        self._counter = 0

    def put(
        self,
        key: str,
        params: UNetParameters,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> str:
        """
        Store a checkpoint under `key`, replacing any previous one.

        Args:
            key: Checkpoint name (e.g. "fold-0")
            params: Parameters to store
            metadata: Optional JSON-compatible metadata

        Returns:
            Checkpoint ID
        """
        self._counter += 1
        checkpoint_id = f"checkpoint-{self._counter}"
        self._checkpoints[key] = CheckpointEntry(
            key=key,
            checkpoint_id=checkpoint_id,
            spec=params.spec,
            arrays={name: array.copy() for name, array in params.arrays().items()},
            metadata=copy.deepcopy(metadata or {}),
        )
        return checkpoint_id

    def get_tuple(self, key: str) -> Optional[CheckpointEntry]:
        return self._checkpoints.get(key)

    def get(self, key: str) -> Optional[UNetParameters]:
        entry = self.get_tuple(key)
        if entry:
            return entry.parameters()
        return None

    def list(self, limit: Optional[int] = None) -> Iterator[CheckpointEntry]:
        """List checkpoints, newest first."""
        entries = sorted(self._checkpoints.values(), key=lambda e: e.created_at, reverse=True)
        if limit:
            entries = entries[:limit]
        yield from entries

    def delete(self, key: str) -> bool:
        if key in self._checkpoints:
            del self._checkpoints[key]
            return True
        return False

    def clear(self):
        self._checkpoints.clear()
        self._counter = 0

    def __len__(self) -> int:
        return len(self._checkpoints)

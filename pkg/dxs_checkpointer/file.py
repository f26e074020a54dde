"""
File checkpointer: one DXT1 tensor per parameter plus a JSON descriptor.

    <root>/<key>/architecture.json   spec, parameter names, dtype, metadata
    <root>/<key>/<parameter>.dxt
"""

from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Union

from dxs_checkpointer.memory import CheckpointEntry
from dxs_core.tensorfile import atomic_write_json, read_json, read_tensor, write_tensor
from dxs_core.unet import UNetParameters, UNetSpec
from dxs_graph.errors import TensorFileError

DESCRIPTOR_NAME = "architecture.json"


class FileCheckpointer:
    """
    Persists parameter checkpoints below a root directory.

    Same interface as MemoryCheckpointer. Parameter files are written before
    the descriptor, so a directory without a descriptor is an incomplete
    checkpoint and is ignored by get().
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def _dir(self, key: str) -> Path:
        return self.root / key

    def put(
        self,
        key: str,
        params: UNetParameters,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> str:
        directory = self._dir(key)
        dtype = None
        for name, array in params.arrays().items():
            write_tensor(directory / f"{name}.dxt", array)
            dtype = str(array.dtype)
        created_at = datetime.now(timezone.utc).isoformat()
        atomic_write_json(directory / DESCRIPTOR_NAME, {
            "key": key,
            "spec": params.spec.model_dump(),
            "names": params.names,
            "dtype": dtype,
            "metadata": metadata or {},
            "created_at": created_at,
        })
        return f"{key}@{created_at}"

    def get_tuple(self, key: str) -> Optional[CheckpointEntry]:
        descriptor_path = self._dir(key) / DESCRIPTOR_NAME
        if not descriptor_path.is_file():
            return None
        descriptor = read_json(descriptor_path)
        spec = UNetSpec(**descriptor["spec"])
        try:
            arrays = {name: read_tensor(self._dir(key) / f"{name}.dxt") for name in descriptor["names"]}
        except TensorFileError:
            return None
        return CheckpointEntry(
            key=key,
            checkpoint_id=f"{key}@{descriptor['created_at']}",
            spec=spec,
            arrays=arrays,
            metadata=descriptor.get("metadata", {}),
            created_at=datetime.fromisoformat(descriptor["created_at"]),
        )

    def get(self, key: str) -> Optional[UNetParameters]:
        entry = self.get_tuple(key)
        if entry:
            return entry.parameters()
        return None

    def list(self, limit: Optional[int] = None) -> Iterator[CheckpointEntry]:
        if not self.root.is_dir():
            return
        entries = [
            entry
            for entry in (self.get_tuple(p.name) for p in sorted(self.root.iterdir()) if p.is_dir())
            if entry is not None
        ]
        entries.sort(key=lambda e: e.created_at, reverse=True)
        if limit:
            entries = entries[:limit]
        yield from entries

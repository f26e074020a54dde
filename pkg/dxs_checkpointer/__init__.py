"""
Parameter checkpointers for dxs.

Provides checkpointers for:
- In-memory (testing)
- DXT files with a JSON architecture descriptor (CLI, training runs)
"""

from dxs_checkpointer.file import FileCheckpointer
from dxs_checkpointer.memory import CheckpointEntry, MemoryCheckpointer

__all__ = [
    "CheckpointEntry",
    "FileCheckpointer",
    "MemoryCheckpointer",
]

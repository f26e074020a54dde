"""
DXT1 tensor container and atomic file writes.

Layout (all little-endian):
    magic   b"DXT1"
    u8      dtype code (0 = float32, 1 = float64)
    u8      rank
    u32     extent, repeated rank times
    payload raw IEEE-754 values in row-major order

Every writer in the package goes through atomic_write_bytes so a failed
command never leaves a partial file behind.
"""

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Union

import numpy as np

from dxs_graph.errors import TensorFileError

MAGIC = b"DXT1"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}

PathLike = Union[str, os.PathLike]


# =============================================================================
# Atomic Writes
# =============================================================================

def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temporary sibling file and rename it over `path` on success."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as e:
        raise TensorFileError(path, f"cannot create output: {e}") from e

    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except OSError as e:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise TensorFileError(path, f"write failed: {e}") from e


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise TensorFileError(path, "file not found") from None
    except (OSError, json.JSONDecodeError) as e:
        raise TensorFileError(path, f"cannot read JSON: {e}") from e


# =============================================================================
# Encode / Decode
# =============================================================================

def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize a float32/float64 array to DXT1 bytes."""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TypeError(f"DXT1 supports float32 and float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError(f"rank {array.ndim} exceeds container limit")
    if any(extent > 0xFFFFFFFF for extent in array.shape):
        raise ValueError(f"extent too large for u32: {array.shape}")

    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
    return header + payload


def decode_tensor(blob: bytes, source: PathLike = "<bytes>") -> np.ndarray:
    """Parse DXT1 bytes back into an array with the stored dtype and shape."""
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TensorFileError(source, "bad magic, not a DXT1 tensor file")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPES:
        raise TensorFileError(source, f"unknown dtype code {code}")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise TensorFileError(source, "truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank

    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise TensorFileError(source, f"payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise TensorFileError(path, "file not found") from None
    except OSError as e:
        raise TensorFileError(path, f"cannot read: {e}") from e
    return decode_tensor(blob, path)

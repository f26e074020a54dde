"""
8-bit grayscale PNG export.

FF maps: 0 -> 0, 1 -> 255, round half up, background zeroed.
Difference maps: [-range, +range] -> [0, 255], zero difference -> 128.
"""

import io
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from dxs_core.tensorfile import atomic_write_bytes


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def ff_to_gray(ff: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    gray = _round_half_up(np.clip(np.asarray(ff, dtype=np.float64), 0.0, 1.0) * 255.0)
    if mask is not None:
        gray = np.where(mask, gray, 0.0)
    return gray.astype(np.uint8)


def difference_to_gray(diff: np.ndarray, value_range: float = 0.10,
                       mask: Optional[np.ndarray] = None) -> np.ndarray:
    scaled = (np.clip(np.asarray(diff, dtype=np.float64), -value_range, value_range) + value_range)
    gray = _round_half_up(scaled / (2.0 * value_range) * 255.0)
    if mask is not None:
        gray = np.where(mask, gray, 128.0)
    return np.clip(gray, 0, 255).astype(np.uint8)


def magnitude_to_gray(image: np.ndarray, peak: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Scale a non-negative image so `peak` maps to 255."""
    if peak <= 0:
        return np.zeros(np.shape(image), dtype=np.uint8)
    gray = _round_half_up(np.clip(np.asarray(image, dtype=np.float64) / peak, 0.0, 1.0) * 255.0)
    if mask is not None:
        gray = np.where(mask, gray, 0.0)
    return gray.astype(np.uint8)


def encode_png(gray: np.ndarray) -> bytes:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"PNG export needs a 2-D image, got {gray.shape}")
    buffer = io.BytesIO()
    Image.fromarray(gray).save(buffer, format="PNG")
    return buffer.getvalue()


def write_png(path: Union[str, Path], gray: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(gray))

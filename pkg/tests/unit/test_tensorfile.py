"""
Unit tests for the DXT1 container, atomic writes and PNG export.
"""

import io
import struct

import numpy as np
import pytest
from PIL import Image

from dxs_core.export import difference_to_gray, encode_png, ff_to_gray, magnitude_to_gray, write_png
from dxs_core.tensorfile import (
    MAGIC,
    atomic_write_bytes,
    atomic_write_json,
    decode_tensor,
    encode_tensor,
    read_json,
    read_tensor,
    write_tensor,
)
from dxs_graph.errors import TensorFileError


@pytest.mark.unit
class TestTensorContainer:
    """Tests for DXT1 encoding."""

    def test_header_layout(self):
        """Magic, dtype code, rank and little-endian u32 extents precede the payload."""
        blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
        assert blob[:4] == MAGIC
        assert blob[4] == 0
        assert blob[5] == 2
        assert struct.unpack_from("<2I", blob, 6) == (2, 3)
        assert len(blob) == 6 + 8 + 2 * 3 * 4

    def test_float64_code(self):
        """float64 tensors carry dtype code 1."""
        assert encode_tensor(np.zeros(1, dtype=np.float64))[4] == 1

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_decode_preserves_values_and_dtype(self, dtype):
        """Random shapes of rank 1-4 decode to the same dtype, shape and bits."""
        rng = np.random.default_rng(11)
        for _ in range(50):
            shape = tuple(int(n) for n in rng.integers(1, 7, size=rng.integers(1, 5)))
            array = (rng.standard_normal(shape) * 10.0 ** rng.integers(-6, 7)).astype(dtype)
            array.flat[0] = rng.choice([0.0, -0.0, np.inf, -np.inf, np.finfo(dtype).tiny])
            decoded = decode_tensor(encode_tensor(array))
            assert decoded.dtype == np.dtype(dtype)
            assert decoded.shape == shape
            assert decoded.tobytes() == array.tobytes()

    def test_rejects_integer_arrays(self):
        """Only IEEE float32/float64 are supported."""
        with pytest.raises(TypeError):
            encode_tensor(np.zeros(3, dtype=np.int32))

    def test_bad_magic(self):
        """Foreign bytes raise TensorFileError."""
        with pytest.raises(TensorFileError):
            decode_tensor(b"PNG\x00\x00\x00\x00\x00")

    def test_truncated_payload(self):
        """A short payload is reported with the source name."""
        blob = encode_tensor(np.ones((4,), dtype=np.float32))[:-2]
        with pytest.raises(TensorFileError) as exc:
            decode_tensor(blob, "ff.dxt")
        assert exc.value.path == "ff.dxt"

    def test_unknown_dtype_code(self):
        """dtype codes other than 0 and 1 are rejected."""
        blob = bytearray(encode_tensor(np.ones((1,), dtype=np.float32)))
        blob[4] = 9
        with pytest.raises(TensorFileError):
            decode_tensor(bytes(blob))


@pytest.mark.unit
class TestFiles:
    """Tests for file helpers."""

    def test_write_and_read_tensor(self, tmp_path):
        """Files in nested directories are created on demand."""
        path = tmp_path / "a" / "b" / "x.dxt"
        write_tensor(path, np.eye(3, dtype=np.float32))
        np.testing.assert_array_equal(read_tensor(path), np.eye(3))

    def test_missing_file(self, tmp_path):
        """Reading a missing tensor raises TensorFileError."""
        with pytest.raises(TensorFileError):
            read_tensor(tmp_path / "missing.dxt")

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        """Only the target file remains after a write."""
        atomic_write_bytes(tmp_path / "out.bin", b"abc")
        assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]

    def test_failed_write_keeps_previous_content(self, tmp_path, mocker):
        """A failing rename leaves the old file intact and raises TensorFileError."""
        target = tmp_path / "out.json"
        atomic_write_json(target, {"v": 1})
        mocker.patch("dxs_core.tensorfile.os.replace", side_effect=OSError("disk full"))
        with pytest.raises(TensorFileError):
            atomic_write_json(target, {"v": 2})
        assert read_json(target) == {"v": 1}
        assert [p.name for p in tmp_path.iterdir()] == ["out.json"]

    def test_read_json_missing(self, tmp_path):
        """Missing JSON files raise TensorFileError."""
        with pytest.raises(TensorFileError):
            read_json(tmp_path / "nope.json")


@pytest.mark.unit
class TestPngExport:
    """Tests for grayscale image conversion."""

    def test_ff_gray_scale(self):
        """0 -> 0, 1 -> 255, 0.5 -> 128 (round half up)."""
        np.testing.assert_array_equal(ff_to_gray(np.array([0.0, 1.0, 0.5])), [0, 255, 128])

    def test_ff_gray_background(self):
        """Voxels outside the mask are black."""
        gray = ff_to_gray(np.array([0.8, 0.8]), mask=np.array([True, False]))
        assert gray[1] == 0

    def test_difference_gray(self):
        """Zero difference maps to 128; +-range to 255 and 0."""
        np.testing.assert_array_equal(difference_to_gray(np.array([0.0, 0.1, -0.1, 0.5])), [128, 255, 0, 255])

    def test_difference_background_is_mid_gray(self):
        """Masked-out difference voxels are 128."""
        assert difference_to_gray(np.array([0.05]), mask=np.array([False]))[0] == 128

    def test_magnitude_gray(self):
        """The peak maps to 255; a zero peak gives a black image."""
        np.testing.assert_array_equal(magnitude_to_gray(np.array([0.0, 2.0, 4.0]), 4.0), [0, 128, 255])
        assert not magnitude_to_gray(np.ones(3), 0.0).any()

    def test_png_is_8bit_grayscale(self, tmp_path):
        """Written PNGs decode to 'L' mode with the same pixels."""
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_png(tmp_path / "ff.png", gray)
        with Image.open(tmp_path / "ff.png") as image:
            assert image.mode == "L"
            np.testing.assert_array_equal(np.asarray(image), gray)

    def test_png_needs_2d(self):
        """Volumes cannot be encoded directly."""
        with pytest.raises(ValueError):
            encode_png(np.zeros((2, 2, 2), dtype=np.uint8))

    def test_encoded_bytes_are_png(self):
        """encode_png produces a decodable PNG stream."""
        blob = encode_png(np.zeros((2, 2), dtype=np.uint8))
        with Image.open(io.BytesIO(blob)) as image:
            assert image.format == "PNG"

"""
Unit tests for the U-Net and the gradient self-test suite.
"""

import numpy as np
import pytest

from dxs_core.autodiff import Tape, Tensor, masked_mse
from dxs_core.gradcheck import GRADCHECK_TOLERANCE, op_cases, run_case, run_gradient_suite, unet_case
from dxs_core.unet import (
    CropRecord,
    UNetParameters,
    UNetSpec,
    build_unet,
    forward,
    pad_input,
    parameter_shapes,
    predict,
)
from dxs_graph.errors import ShapeError


@pytest.mark.unit
class TestArchitecture:
    """Tests for parameter enumeration and initialization."""

    def test_parameter_shapes(self, small_spec):
        """Channel counts double per level and halve on the way up."""
        shapes = dict(parameter_shapes(small_spec))
        assert shapes["enc0.conv1.weight"] == (2, 6, 3, 3)
        assert shapes["enc1.conv1.weight"] == (4, 2, 3, 3)
        assert shapes["bottleneck.conv1.weight"] == (8, 4, 3, 3)
        assert shapes["dec1.up.weight"] == (8, 4, 2, 2)
        assert shapes["dec1.conv1.weight"] == (4, 8, 3, 3)
        assert shapes["dec0.conv1.weight"] == (2, 4, 3, 3)
        assert shapes["head.weight"] == (1, 2, 1, 1)

    def test_enumeration_order(self, small_spec):
        """Encoder first, head last."""
        names = [name for name, _ in parameter_shapes(small_spec)]
        assert names[0] == "enc0.conv1.weight"
        assert names[-1] == "head.bias"
        assert len(names) == len(set(names))

    def test_in_channels_follow_echo_count(self):
        """Two channels per echo."""
        assert UNetSpec().with_echoes(3).in_channels == 6
        assert UNetSpec(depth=3).multiple == 8

    def test_build_is_seeded(self, small_spec):
        """Same seed, same weights; biases start at zero."""
        a = build_unet(small_spec, init_seed=4)
        b = build_unet(small_spec, init_seed=4)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        assert not a["enc0.conv1.bias"].data.any()
        assert a["enc0.conv1.weight"].dtype == np.float32

    def test_missing_parameter(self, small_spec):
        """Incomplete parameter sets are rejected."""
        tensors = dict(build_unet(small_spec).tensors)
        tensors.pop("head.bias")
        with pytest.raises(ShapeError):
            UNetParameters(small_spec, tensors)

    def test_from_arrays_checks_shapes(self, small_spec):
        """Stored arrays must match the architecture."""
        arrays = build_unet(small_spec).arrays()
        arrays["head.weight"] = np.zeros((1, 3, 1, 1), dtype=np.float32)
        with pytest.raises(ShapeError) as exc:
            UNetParameters.from_arrays(small_spec, arrays)
        assert exc.value.dimension == "head.weight"

    def test_astype(self, small_spec):
        """astype converts every tensor and keeps the names."""
        params = build_unet(small_spec).astype(np.float64)
        assert all(params[name].dtype == np.float64 for name in params)
        assert params.count() == build_unet(small_spec).count()


@pytest.mark.unit
class TestPadding:
    """Tests for zero padding to multiples of 2^depth."""

    def test_pad_to_multiple(self):
        """Bottom/right zero padding; the crop record keeps the original extents."""
        x = np.ones((2, 30, 20), dtype=np.float32)
        padded, crop = pad_input(x, depth=3)
        assert padded.shape == (2, 32, 24)
        assert crop == CropRecord(30, 20)
        assert not padded.data[:, 30:, :].any()
        assert crop.crop(padded.data).shape == (2, 30, 20)

    def test_already_aligned(self):
        """Aligned inputs are unchanged."""
        padded, crop = pad_input(np.ones((1, 16, 16)), depth=2)
        assert padded.shape == (1, 16, 16)
        assert crop == CropRecord(16, 16)

    def test_small_input_keeps_a_2x2_bottleneck(self):
        """Aligned but tiny slices are padded to 2^(depth+1) per side."""
        padded, crop = pad_input(np.ones((1, 8, 8)), depth=3)
        assert padded.shape == (1, 16, 16)
        assert crop == CropRecord(8, 8)

    def test_rank(self):
        """Inputs must be [C, H, W]."""
        with pytest.raises(ShapeError):
            pad_input(np.ones((16, 16)), depth=2)


@pytest.mark.unit
class TestForward:
    """Tests for the forward pass."""

    def test_output_shape(self, small_spec):
        """[2K, H, W] in, [1, H, W] out."""
        params = build_unet(small_spec)
        x = Tensor(np.random.default_rng(0).normal(size=(6, 16, 16)))
        assert forward(params, x).shape == (1, 16, 16)

    def test_channel_mismatch(self, small_spec):
        """The input must have in_channels planes."""
        with pytest.raises(ShapeError):
            forward(build_unet(small_spec), Tensor(np.zeros((4, 16, 16))))

    def test_extent_not_multiple(self, small_spec):
        """Unpadded extents are rejected."""
        with pytest.raises(ShapeError):
            forward(build_unet(small_spec), Tensor(np.zeros((6, 18, 16))))

    def test_bottleneck_too_small(self, small_spec):
        """The bottleneck must be at least 2x2 for the reflective pad."""
        with pytest.raises(ShapeError):
            forward(build_unet(small_spec), Tensor(np.zeros((6, 4, 4))))

    def test_predict_crops_and_clamps(self, small_spec):
        """predict() returns an [H, W] map in [0, 1] for any extents."""
        params = build_unet(small_spec, init_seed=1)
        x = Tensor(np.random.default_rng(1).normal(size=(6, 14, 10)))
        ff = predict(params, x)
        assert ff.shape == (14, 10)
        assert ff.min() >= 0.0 and ff.max() <= 1.0

    def test_predict_small_slice_at_depth_three(self):
        """An 8x8 slice runs through a depth-3 network and comes back 8x8."""
        params = build_unet(UNetSpec(depth=3, base_features=2, in_channels=2), init_seed=2)
        ff = predict(params, Tensor(np.random.default_rng(2).normal(size=(2, 8, 8))))
        assert ff.shape == (8, 8)

    def test_gradients_reach_every_parameter(self, small_spec):
        """A masked loss back-propagates into every tensor."""
        params = build_unet(small_spec, init_seed=2, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(6, 8, 8)), dtype=np.float64)
        target = Tensor(rng.random((1, 8, 8)), dtype=np.float64)
        mask = Tensor(np.ones((1, 8, 8)), dtype=np.float64)
        with Tape() as tape:
            loss = masked_mse(forward(params, x), target, mask)
        grads = tape.backward(loss)
        assert all(params[name] in grads for name in params)
        assert grads[params["head.bias"]].shape == (1,)


@pytest.mark.unit
class TestGradientSuite:
    """Tests for the finite-difference self-test."""

    def test_op_cases_cover_every_op(self):
        """One case per differentiable op."""
        names = [case.name for case in op_cases()]
        assert names == ["conv2d", "reflect_pad", "maxpool2", "upconv2", "relu", "concat_channels", "masked_mse"]

    @pytest.mark.parametrize("index", range(7))
    def test_op_case_passes(self, index):
        """Every op matches central differences within tolerance."""
        result = run_case(op_cases()[index])
        assert result.passed, f"{result.name}: {result.max_relative_error:.3e}"

    def test_unet_case_passes(self):
        """The depth-2 network on an 8x8 input passes."""
        result = run_case(unet_case())
        assert result.name == "unet[depth=2,8x8]"
        assert result.max_relative_error < GRADCHECK_TOLERANCE

    def test_injected_fault_is_detected(self):
        """Scaling analytic gradients by 1.01 is reported above 1e-3."""
        results = run_gradient_suite(grad_scale=1.01, cases=op_cases()[:1])
        assert results[0].max_relative_error > 1e-3
        assert not results[0].passed

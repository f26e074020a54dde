"""
Modified U-Net regressing a fat-fraction map from multi-echo input.

Per level: two 3x3 convolutions with ReLU, each preceded by a width-1
reflective pad so the spatial size is preserved. Encoder levels are joined
by 2x2 max pooling, decoder levels by a 2x2 stride-2 up-convolution that
halves the channel count, followed by concatenation with the encoder skip
tensor. A 1x1 convolution without activation produces the single output
plane.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dxs_core.autodiff import (
    Tensor,
    concat_channels,
    conv2d,
    maxpool2,
    reflect_pad,
    relu,
    upconv2,
)
from dxs_graph.errors import ShapeError

logger = logging.getLogger(__name__)


class UNetSpec(BaseModel):
    """Architecture descriptor."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(3, ge=1, le=8, description="Number of poolings")
    base_features: int = Field(16, ge=1)
    in_channels: int = Field(10, ge=1, description="2 per echo")
    out_channels: int = Field(1, ge=1, le=1)

    def features(self, level: int) -> int:
        return self.base_features * 2 ** level

    def with_echoes(self, n_echoes: int) -> "UNetSpec":
        return self.model_copy(update={"in_channels": 2 * n_echoes})

    @property
    def multiple(self) -> int:
        """Input extents must be multiples of this."""
        return 2 ** self.depth


def parameter_shapes(spec: UNetSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) enumeration of every parameter."""
    shapes: List[Tuple[str, Tuple[int, ...]]] = []

    def conv(prefix: str, cin: int, cout: int, k: int = 3) -> None:
        shapes.append((f"{prefix}.weight", (cout, cin, k, k)))
        shapes.append((f"{prefix}.bias", (cout,)))

    cin = spec.in_channels
    for d in range(spec.depth):
        f = spec.features(d)
        conv(f"enc{d}.conv1", cin, f)
        conv(f"enc{d}.conv2", f, f)
        cin = f

    f_bottom = spec.features(spec.depth)
    conv("bottleneck.conv1", cin, f_bottom)
    conv("bottleneck.conv2", f_bottom, f_bottom)

    for d in range(spec.depth - 1, -1, -1):
        f = spec.features(d)
        shapes.append((f"dec{d}.up.weight", (spec.features(d + 1), f, 2, 2)))
        shapes.append((f"dec{d}.up.bias", (f,)))
        conv(f"dec{d}.conv1", 2 * f, f)
        conv(f"dec{d}.conv2", f, f)

    conv("head", spec.features(0), spec.out_channels, k=1)
    return shapes


@dataclass
class UNetParameters:
    """Named parameter tensors plus the architecture they belong to."""
    spec: UNetSpec
    tensors: Dict[str, Tensor]

    def __post_init__(self):
        expected = [name for name, _ in parameter_shapes(self.spec)]
        if sorted(expected) != sorted(self.tensors):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ShapeError("UNetParameters", "names", f"missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.tensors = {name: self.tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "UNetParameters":
        return UNetParameters(
            self.spec,
            {name: Tensor(t.data, requires_grad=True, name=name, dtype=dtype) for name, t in self.tensors.items()},
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, spec: UNetSpec, arrays: Dict[str, np.ndarray]) -> "UNetParameters":
        shapes = dict(parameter_shapes(spec))
        tensors = {}
        for name, array in arrays.items():
            if name in shapes and tuple(array.shape) != shapes[name]:
                raise ShapeError("UNetParameters", name, f"{tuple(array.shape)} != {shapes[name]}")
            tensors[name] = Tensor(array, requires_grad=True, name=name, dtype=array.dtype)
        return cls(spec, tensors)


def build_unet(spec: UNetSpec, init_seed: Union[int, np.random.SeedSequence] = 0, dtype=np.float32) -> UNetParameters:
    """
    Initialize parameters: He-scaled Gaussian weights (std sqrt(2/fan_in)),
    zero biases, drawn in enumeration order from `init_seed`.
    """
    rng = np.random.default_rng(init_seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            if ".up." in name:
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    logger.debug(f"build_unet: {len(tensors)} tensors for depth={spec.depth}, F0={spec.base_features}")
    return UNetParameters(spec, tensors)


# =============================================================================
# Padding
# =============================================================================

@dataclass(frozen=True)
class CropRecord:
    """Original spatial extents of a padded slice."""
    height: int
    width: int

    def crop(self, array: np.ndarray) -> np.ndarray:
        return array[..., : self.height, : self.width]


def pad_input(x: Union[Tensor, np.ndarray], depth: int) -> Tuple[Tensor, CropRecord]:
    """
    Zero-pad bottom/right so H and W are multiples of 2^depth.

    Extents are also raised to at least 2^(depth+1): the bottleneck needs 2x2
    for its reflective padding.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 3:
        raise ShapeError("pad_input", "rank", f"expected [C,H,W], got {data.shape}")
    _, h, w = data.shape
    multiple = 2 ** depth
    target_h = max(-(-h // multiple) * multiple, 2 * multiple)
    target_w = max(-(-w // multiple) * multiple, 2 * multiple)
    padded = np.pad(data, ((0, 0), (0, target_h - h), (0, target_w - w)))
    return Tensor(padded, dtype=data.dtype), CropRecord(h, w)


# =============================================================================
# Forward
# =============================================================================

def _conv_block(params: UNetParameters, prefix: str, x: Tensor) -> Tensor:
    x = relu(conv2d(reflect_pad(x, 1), params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"]))
    x = relu(conv2d(reflect_pad(x, 1), params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"]))
    return x


def forward(params: UNetParameters, x: Tensor) -> Tensor:
    """
    Raw (unclamped) FF prediction [1, H, W] for an input [2K, H, W].

    H and W must be multiples of 2^depth with a bottleneck of at least 2x2.
    """
    spec = params.spec
    if x.ndim != 3:
        raise ShapeError("forward", "rank", f"expected [C,H,W], got {x.shape}")
    channels, h, w = x.shape
    if channels != spec.in_channels:
        raise ShapeError("forward", "C", f"input has {channels} channels, network expects {spec.in_channels}")
    if h % spec.multiple or w % spec.multiple:
        raise ShapeError("forward", "H,W", f"{h}x{w} not a multiple of {spec.multiple}; use pad_input")
    if min(h, w) // spec.multiple < 2:
        raise ShapeError("forward", "H,W", f"{h}x{w} too small for depth {spec.depth}")

    skips: List[Tensor] = []
    for d in range(spec.depth):
        x = _conv_block(params, f"enc{d}", x)
        skips.append(x)
        x, _ = maxpool2(x)

    x = _conv_block(params, "bottleneck", x)

    for d in range(spec.depth - 1, -1, -1):
        x = upconv2(x, params[f"dec{d}.up.weight"], params[f"dec{d}.up.bias"])
        x = concat_channels(skips[d], x)
        x = _conv_block(params, f"dec{d}", x)

    return conv2d(x, params["head.weight"], params["head.bias"])


def predict(params: UNetParameters, channels: Tensor) -> np.ndarray:
    """Inference on one unpadded slice: pad, forward, crop, clamp to [0, 1]."""
    padded, crop = pad_input(channels, params.spec.depth)
    out = forward(params, padded)
    return np.clip(crop.crop(out.data[0]).astype(np.float64), 0.0, 1.0)

"""
Gradient self-test suite.

Each case builds random float64 inputs, reduces the op output to a scalar
with a fixed random read-out and compares reverse-mode gradients with
central differences through grad_check. The last case runs a depth-2 U-Net
on an 8x8 input.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from dxs_core.autodiff import (
    GradCheckReport,
    Tensor,
    concat_channels,
    conv2d,
    grad_check,
    masked_mse,
    maxpool2,
    reflect_pad,
    relu,
    upconv2,
    weighted_sum,
)
from dxs_core.unet import UNetParameters, UNetSpec, build_unet, forward

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5


@dataclass
class GradCase:
    """A named scalar function of float64 tensors."""
    name: str
    fn: Callable[..., Tensor]
    inputs: List[Tensor]
    max_coords: Optional[int] = None


@dataclass
class GradCaseResult:
    name: str
    report: GradCheckReport
    seconds: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)

    @property
    def max_relative_error(self) -> float:
        return self.report.max_relative_error


def _t(rng: np.random.Generator, *shape: int, name: Optional[str] = None) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name, dtype=np.float64)


def _readout(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def op_cases(seed: int = 0) -> List[GradCase]:
    """One case per differentiable op."""
    rng = np.random.default_rng(seed)
    cases: List[GradCase] = []

    x, k, b = _t(rng, 2, 6, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    w_conv = _readout(rng, (3, 4, 4))
    cases.append(GradCase("conv2d", lambda x, k, b: weighted_sum(conv2d(x, k, b), w_conv), [x, k, b]))

    x = _t(rng, 2, 5, 5)
    w_pad = _readout(rng, (2, 9, 9))
    cases.append(GradCase("reflect_pad", lambda x: weighted_sum(reflect_pad(x, 2), w_pad), [x]))

    x = _t(rng, 2, 6, 6)
    w_pool = _readout(rng, (2, 3, 3))
    cases.append(GradCase("maxpool2", lambda x: weighted_sum(maxpool2(x)[0], w_pool), [x]))

    x, k, b = _t(rng, 3, 3, 4), _t(rng, 3, 2, 2, 2), _t(rng, 2)
    w_up = _readout(rng, (2, 6, 8))
    cases.append(GradCase("upconv2", lambda x, k, b: weighted_sum(upconv2(x, k, b), w_up), [x, k, b]))

    x = _t(rng, 2, 4, 4)
    w_relu = _readout(rng, (2, 4, 4))
    cases.append(GradCase("relu", lambda x: weighted_sum(relu(x), w_relu), [x]))

    a, c = _t(rng, 1, 3, 3), _t(rng, 2, 3, 3)
    w_cat = _readout(rng, (3, 3, 3))
    cases.append(GradCase("concat_channels", lambda a, c: weighted_sum(concat_channels(a, c), w_cat), [a, c]))

    pred, target = _t(rng, 1, 5, 5), _t(rng, 1, 5, 5)
    mask_data = (rng.random((1, 5, 5)) < 0.6).astype(np.float64)
    mask_data[0, 0, 0] = 1.0
    mask = Tensor(mask_data, dtype=np.float64)
    cases.append(GradCase("masked_mse", lambda p, t: masked_mse(p, t, mask), [pred, target]))

    return cases


def unet_case(seed: int = 0, depth: int = 2, size: int = 8, in_channels: int = 2,
              base_features: int = 2, max_coords: Optional[int] = 24) -> GradCase:
    """Whole-network case: d(readout . forward(params, x)) w.r.t. x and every parameter."""
    spec = UNetSpec(depth=depth, base_features=base_features, in_channels=in_channels)
    params = build_unet(spec, init_seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = _t(rng, in_channels, size, size, name="input")
    w_out = _readout(rng, (1, size, size))
    names = params.names

    def objective(x: Tensor, *tensors: Tensor) -> Tensor:
        net = UNetParameters(spec, dict(zip(names, tensors)))
        return weighted_sum(forward(net, x), w_out)

    return GradCase(f"unet[depth={depth},{size}x{size}]", objective,
                    [x, *(params[n] for n in names)], max_coords=max_coords)


def run_case(case: GradCase, grad_scale: float = 1.0, tolerance: float = GRADCHECK_TOLERANCE,
             seed: int = 0) -> GradCaseResult:
    start = time.perf_counter()
    report = grad_check(case.fn, case.inputs, h=GRADCHECK_STEP, max_coords=case.max_coords,
                        seed=seed, grad_scale=grad_scale)
    result = GradCaseResult(case.name, report, time.perf_counter() - start, tolerance)
    logger.info(f"gradcheck {case.name}: max_rel={report.max_relative_error:.3e} "
                f"({'ok' if result.passed else 'FAIL'})")
    return result


def run_gradient_suite(
    grad_scale: float = 1.0,
    tolerance: float = GRADCHECK_TOLERANCE,
    seed: int = 0,
    cases: Optional[Sequence[GradCase]] = None,
) -> List[GradCaseResult]:
    """
    Run every op case plus the U-Net case.

    Args:
        grad_scale: Multiplier applied to analytic gradients (1.01 injects a fault)
        tolerance: Maximum relative error for a pass
        seed: Seed for inputs and coordinate sampling

    Returns:
        One result per case, in suite order
    """
    if cases is None:
        cases = [*op_cases(seed), unet_case(seed)]
    return [run_case(case, grad_scale=grad_scale, tolerance=tolerance, seed=seed) for case in cases]

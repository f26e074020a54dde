"""
Reverse-mode automatic differentiation for the U-Net.

Dense tensors wrap numpy arrays. Operations executed inside an active Tape
are recorded in execution order; Tape.backward replays them once in reverse,
accumulating gradients additively for values consumed by several ops.

The op set is exactly what the network needs: valid 2-D convolution,
reflective padding, 2x2 max pooling, 2x2 stride-2 up-convolution, ReLU,
channel concatenation and the masked squared-error loss. Adam and a
finite-difference gradient checker complete the module.

All ops are pure functions of their inputs. A Tape is single-owner; the
active tape is held in a context variable so concurrent tasks never share
one.
"""

import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dxs_graph.errors import (
    EmptyMaskError,
    NonFiniteGradientError,
    PaddingError,
    ShapeError,
)

logger = logging.getLogger(__name__)


# =============================================================================
# Precision
# =============================================================================

_default_dtype = contextvars.ContextVar("dxs_default_dtype", default=np.dtype(np.float32))


def default_dtype() -> np.dtype:
    """Floating dtype used for new tensors (float32 unless overridden)."""
    return _default_dtype.get()


@contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily switch the default tensor dtype (float64 for gradient checks)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor dtype: {dtype}")
    token = _default_dtype.set(dtype)
    try:
        yield dtype
    finally:
        _default_dtype.reset(token)


# =============================================================================
# Tensor
# =============================================================================

class Tensor:
    """
    Dense real-valued array in row-major order.

    The wrapped array is owned by the tensor; ops never modify inputs in
    place.
    """

    __slots__ = ("data", "name", "requires_grad")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        self.data = np.array(data, dtype=dtype or default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        """Wrap an op result without copying or changing its dtype."""
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = False
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


# =============================================================================
# Computation Record
# =============================================================================

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeEntry:
    """One executed op: inputs, output and the closure computing input grads."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    smooth: bool = True


class Gradients:
    """Gradient arrays keyed by tensor identity."""

    def __init__(self, grads: Dict[int, np.ndarray], tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def get(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self._grads.get(id(tensor))

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads


_active_tape: contextvars.ContextVar = contextvars.ContextVar("dxs_active_tape", default=None)


class Tape:
    """
    Ordered record of executed ops enabling exactly one reverse pass.

    Use as a context manager; ops executed inside the block are recorded.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.visits: List[str] = []
        self._token = None
        self._replayed = False

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    @property
    def has_nonsmooth(self) -> bool:
        """True if any recorded op has kinks (ReLU, max pooling)."""
        return any(not entry.smooth for entry in self.entries)

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> Gradients:
        """
        Reverse pass from `loss`.

        Every entry is visited exactly once, last-executed first. Gradients of
        values consumed by several ops are summed.
        """
        if self._replayed:
            raise RuntimeError("Tape has already been replayed")
        self._replayed = True

        if seed is None:
            seed = np.ones_like(loss.data)
        grads: Dict[int, np.ndarray] = {id(loss): seed}
        tensors: Dict[int, Tensor] = {id(loss): loss}

        for entry in reversed(self.entries):
            self.visits.append(entry.op)
            out_grad = grads.get(id(entry.output))
            if out_grad is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(out_grad)):
                if grad is None:
                    continue
                key = id(tensor)
                tensors[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        return Gradients(grads, tensors)


def _record(op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn,
            smooth: bool = True) -> Tensor:
    tape = _active_tape.get()
    if tape is not None:
        tape.record(TapeEntry(op=op, inputs=inputs, output=output, backward=backward, smooth=smooth))
    return output


# =============================================================================
# Convolution Ops
# =============================================================================

def conv2d(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """
    Valid cross-correlation: [Cin,H,W] * [Cout,Cin,kh,kw] + [Cout].

    Output extents are (H-kh+1, W-kw+1).
    """
    if x.ndim != 3:
        raise ShapeError("conv2d", "x", f"expected [Cin,H,W], got {x.shape}")
    if k.ndim != 4:
        raise ShapeError("conv2d", "k", f"expected [Cout,Cin,kh,kw], got {k.shape}")
    cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError("conv2d", "Cin", f"input has {cin} channels, kernel expects {kcin}")
    if h < kh:
        raise ShapeError("conv2d", "H", f"height {h} smaller than kernel height {kh}")
    if w < kw:
        raise ShapeError("conv2d", "W", f"width {w} smaller than kernel width {kw}")
    if bias.shape != (cout,):
        raise ShapeError("conv2d", "Cout", f"bias shape {bias.shape} does not match {cout} output channels")

    ho, wo = h - kh + 1, w - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    out = np.tensordot(k.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    out += bias.data[:, None, None]

    def backward(grad: np.ndarray):
        grad_k = np.tensordot(grad, windows, axes=([1, 2], [1, 2]))
        grad_b = grad.sum(axis=(1, 2))
        grad_x = np.zeros_like(x.data)
        for a in range(kh):
            for b in range(kw):
                grad_x[:, a:a + ho, b:b + wo] += np.tensordot(k.data[:, :, a, b], grad, axes=([0], [0]))
        return grad_x, grad_k, grad_b

    return _record("conv2d", (x, k, bias), Tensor._wrap(out), backward)


def reflect_pad(x: Tensor, p: int) -> Tensor:
    """Mirror p border samples on each spatial side, excluding the edge sample."""
    if x.ndim != 3:
        raise ShapeError("reflect_pad", "x", f"expected [C,H,W], got {x.shape}")
    if p < 0:
        raise PaddingError("reflect_pad", "p", f"negative padding {p}")
    _, h, w = x.shape
    if p >= min(h, w):
        raise PaddingError("reflect_pad", "p", f"padding {p} must be smaller than min(H,W)={min(h, w)}")
    if p == 0:
        return _record("reflect_pad", (x,), Tensor._wrap(x.data.copy()), lambda grad: (grad,))

    out = np.pad(x.data, ((0, 0), (p, p), (p, p)), mode="reflect")

    def backward(grad: np.ndarray):
        return (_fold_reflection(_fold_reflection(grad, p, axis=2), p, axis=1),)

    return _record("reflect_pad", (x,), Tensor._wrap(out), backward)


def _fold_reflection(grad: np.ndarray, p: int, axis: int) -> np.ndarray:
    moved = np.moveaxis(grad, axis, -1)
    n = moved.shape[-1] - 2 * p
    core = moved[..., p:p + n].copy()
    for i in range(1, p + 1):
        core[..., i] += moved[..., p - i]
        core[..., n - 1 - i] += moved[..., p + n - 1 + i]
    return np.moveaxis(core, -1, axis)


def maxpool2(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """
    2x2 max pooling.

    Returns the pooled tensor and the argmax index (0..3, row-major within
    the block) per output position. Ties go to the first element.
    """
    if x.ndim != 3:
        raise ShapeError("maxpool2", "x", f"expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % 2:
        raise ShapeError("maxpool2", "H", f"height {h} is odd")
    if w % 2:
        raise ShapeError("maxpool2", "W", f"width {w} is odd")

    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def backward(grad: np.ndarray):
        routed = np.zeros((c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, argmax[..., None], grad[..., None], axis=-1)
        grad_x = routed.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (grad_x,)

    pooled = _record("maxpool2", (x,), Tensor._wrap(np.ascontiguousarray(out)), backward, smooth=False)
    return pooled, argmax


def upconv2(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """
    Transposed convolution with 2x2 kernel and stride 2.

    Every output pixel receives exactly one contribution per input channel
    plus the bias.
    """
    if x.ndim != 3:
        raise ShapeError("upconv2", "x", f"expected [Cin,H,W], got {x.shape}")
    if k.ndim != 4 or k.shape[2:] != (2, 2):
        raise ShapeError("upconv2", "k", f"expected [Cin,Cout,2,2], got {k.shape}")
    cin, h, w = x.shape
    kcin, cout = k.shape[:2]
    if kcin != cin:
        raise ShapeError("upconv2", "Cin", f"input has {cin} channels, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ShapeError("upconv2", "Cout", f"bias shape {bias.shape} does not match {cout} output channels")

    placed = np.tensordot(k.data, x.data, axes=([0], [0]))  # [Cout,2,2,H,W]
    out = placed.transpose(0, 3, 1, 4, 2).reshape(cout, 2 * h, 2 * w)
    out += bias.data[:, None, None]

    def backward(grad: np.ndarray):
        blocks = grad.reshape(cout, h, 2, w, 2)
        grad_x = np.tensordot(k.data, blocks, axes=([1, 2, 3], [0, 2, 4]))
        grad_k = np.tensordot(x.data, blocks, axes=([1, 2], [1, 3]))
        grad_b = grad.sum(axis=(1, 2))
        return grad_x, grad_k, grad_b

    return _record("upconv2", (x, k, bias), Tensor._wrap(out), backward)


# =============================================================================
# Elementwise / Structural Ops
# =============================================================================

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    active = x.data > 0
    out = np.where(active, x.data, 0).astype(x.dtype, copy=False)

    def backward(grad: np.ndarray):
        return (grad * active,)

    return _record("relu", (x,), Tensor._wrap(out), backward, smooth=False)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack channels, `a` first."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError("concat_channels", "rank", f"expected [C,H,W] inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("concat_channels", "H", f"{a.shape[1]} != {b.shape[1]}")
    if a.shape[2] != b.shape[2]:
        raise ShapeError("concat_channels", "W", f"{a.shape[2]} != {b.shape[2]}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=0)

    def backward(grad: np.ndarray):
        return grad[:ca], grad[ca:]

    return _record("concat_channels", (a, b), Tensor._wrap(out), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(weights * x); a linear read-out used by gradient checks."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError("weighted_sum", "weights", f"{weights.shape} != {x.shape}")
    out = np.asarray((weights * x.data).sum(), dtype=x.dtype)

    def backward(grad: np.ndarray):
        return (grad * weights,)

    return _record("weighted_sum", (x,), Tensor._wrap(out), backward)


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """
    Per-foreground-voxel squared error: sum(mask*(pred-target)^2) / sum(mask).
    """
    if pred.shape != target.shape:
        raise ShapeError("masked_mse", "target", f"{target.shape} != pred {pred.shape}")
    if pred.shape != mask.shape:
        raise ShapeError("masked_mse", "mask", f"{mask.shape} != pred {pred.shape}")
    weights = mask.data != 0
    count = int(weights.sum())
    if count == 0:
        raise EmptyMaskError("masked_mse: mask has no foreground voxels")

    diff = np.where(weights, pred.data - target.data, 0)
    out = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def backward(grad: np.ndarray):
        grad_pred = (2.0 / count) * grad * diff
        return grad_pred.astype(pred.dtype, copy=False), (-grad_pred).astype(target.dtype, copy=False), None

    return _record("masked_mse", (pred, target, mask), Tensor._wrap(out), backward)


# =============================================================================
# Adam
# =============================================================================

@dataclass
class AdamState:
    """Per-parameter moment estimates plus step counter and hyperparameters."""
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    Bias-corrected Adam update.

    Returns new parameter tensors and a new state with t incremented; the
    inputs are left untouched.
    """
    if state.t < 0:
        raise ValueError(f"Adam step counter must be >= 0, got {state.t}")

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError("adam_step", name, f"gradient {grad.shape} != parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)

    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = grads.get(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        if grad is None:
            grad = np.zeros_like(param.data)
        grad = grad.astype(param.dtype, copy=False)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated = Tensor._wrap(data.astype(param.dtype, copy=False))
        updated.name = param.name
        updated.requires_grad = param.requires_grad
        new_params[name] = updated
        new_m[name] = m.astype(param.dtype, copy=False)
        new_v[name] = v.astype(param.dtype, copy=False)

    return new_params, replace(state, t=t, m=new_m, v=new_v)


# =============================================================================
# Gradient Checking
# =============================================================================

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison."""
    max_relative_error: float
    per_input: List[float]
    checked: int
    skipped: int

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    grad_scale: float = 1.0,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of scalar fn(*inputs) with central
    differences.

    Inputs must be float64. Coordinates whose perturbation interval crosses
    a kink (detected through the second difference when the recorded graph
    contains ReLU or pooling) are excluded. `max_coords` samples that many
    coordinates per input; `grad_scale` multiplies the analytic gradients
    (fault injection for self-tests).

    The relative error per input is ||a - n|| / max(||a||, ||n||) over the
    retained coordinates.
    """
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")

    with precision(np.float64):
        with Tape() as tape:
            out = fn(*inputs)
        if out.size != 1:
            raise ShapeError("grad_check", "output", f"fn must return a scalar, got {out.shape}")
        grads = tape.backward(out)
        f0 = float(out.data.reshape(-1)[0])
        check_kinks = tape.has_nonsmooth

        def evaluate() -> float:
            return float(fn(*inputs).data.reshape(-1)[0])

        rng = np.random.default_rng(seed)
        per_input: List[float] = []
        checked = 0
        skipped = 0
        for tensor in inputs:
            analytic_full = grads[tensor].reshape(-1) * grad_scale
            flat = tensor.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

            analytic: List[float] = []
            numeric: List[float] = []
            for idx in coords:
                original = flat[idx]
                flat[idx] = original + h
                f_plus = evaluate()
                flat[idx] = original - h
                f_minus = evaluate()
                flat[idx] = original

                central = (f_plus - f_minus) / (2.0 * h)
                if check_kinks:
                    kink_error = abs(f_plus - 2.0 * f0 + f_minus) / (2.0 * h)
                    if kink_error > 1e-8 + 1e-6 * abs(central):
                        skipped += 1
                        continue
                analytic.append(float(analytic_full[idx]))
                numeric.append(central)

            checked += len(analytic)
            per_input.append(_relative_error(np.asarray(analytic), np.asarray(numeric)))

    report = GradCheckReport(
        max_relative_error=max(per_input) if per_input else 0.0,
        per_input=per_input,
        checked=checked,
        skipped=skipped,
    )
    logger.debug(
        f"grad_check: max_rel={report.max_relative_error:.3e} checked={checked} skipped={skipped}"
    )
    return report


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)

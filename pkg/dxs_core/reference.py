"""
Reference water/fat separation ("reference-surrogate").

A conventional multi-echo separation used to produce training targets from
the odd echoes:

1. Variable projection: for a fixed field value the water and fat
   amplitudes enter linearly, so they are eliminated by complex least
   squares and the fit quality reduces to a 1-D residual over the field.
2. The residual is sampled on a 64-point grid over one period of the
   echo-spacing ambiguity; local minima (refined parabolically) are the
   per-voxel field candidates.
3. Candidate labels are resolved coarse-to-fine: residual surfaces are
   sum-pooled down to 1/8 resolution, a smooth field is grown from the most
   confident voxel and improved by iterated conditional modes with a
   neighbour-difference penalty, then propagated level by level.
4. The field is polished per voxel, W and F are solved by least squares,
   and FF = F / (W + F) is clamped to [0, 1].

R2* is assumed to be zero for the fit. The field is recovered up to a
global multiple of the ambiguity period, which does not affect W, F or FF.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dxs_compute.pool import WorkerPool
from dxs_core.dataset import REFERENCE_METHOD, load_subject, read_manifest, write_reference
from dxs_core.signal_model import (
    AcquisitionConfig,
    EchoSeries,
    EchoSubset,
    FatFractionMap,
    FatSpectrum,
    clamp_ff,
    fat_modulations,
    reference_echo_subset,
    validate_echo_subset,
)
from dxs_core.tensorfile import atomic_write_json
from dxs_graph.errors import EmptyMaskError, RankDeficientBasisError, ShapeError
from dxs_graph.utils.live_logger import report

logger = logging.getLogger(__name__)

# Flag bits in SeparationResult.flags
FLAG_BACKGROUND = 1
FLAG_NOT_CONVERGED = 2


class ReferenceConfig(BaseModel):
    """Parameters of the reference separation."""

    model_config = ConfigDict(extra="forbid")

    echoes: Optional[str] = Field(None, description="Echo subset 'family:count'; all odd echoes if unset")
    smoothness: float = Field(1.0, ge=0.0, description="Neighbour penalty weight (lambda)")
    grid_size: int = Field(64, ge=8)
    max_candidates: int = Field(4, ge=1)
    max_iters: int = Field(50, ge=1)
    levels: int = Field(3, ge=0, description="Number of 2x downsamplings (3 -> 1/8 resolution)")
    refine_rounds: int = Field(8, ge=0)
    background_eps: float = Field(0.05, ge=0.0, lt=1.0)
    mask_threshold: float = Field(0.1, ge=0.0, lt=1.0)

    def echo_subset(self, n_echoes: int) -> EchoSubset:
        if self.echoes is None:
            return reference_echo_subset(n_echoes)
        return EchoSubset.parse(self.echoes).validate(n_echoes)


# =============================================================================
# Result Types
# =============================================================================

@dataclass
class FieldCandidate:
    omega: float
    residual: float


@dataclass
class FieldMap:
    """Field estimate (rad/s) with per-voxel flags."""
    omega: np.ndarray
    flags: np.ndarray
    converged: bool = True
    iterations: List[int] = field(default_factory=list)


@dataclass
class SeparationResult:
    water: np.ndarray
    fat: np.ndarray
    ff: FatFractionMap
    field: FieldMap
    residual: np.ndarray
    mask: np.ndarray
    method: str = REFERENCE_METHOD

    @property
    def flags(self) -> np.ndarray:
        return self.field.flags

    @property
    def background_count(self) -> int:
        return int(np.count_nonzero(self.field.flags & FLAG_BACKGROUND))


# =============================================================================
# Variable Projection
# =============================================================================

class VarproBasis:
    """
    Orthonormalized water/fat basis [1, a_n] for one echo subset.

    The field modulation diag(e^{i w t}) is unitary, so projecting a signal
    on span{e^{i w t}(1, a)} equals projecting e^{-i w t} s on span{1, a}.
    """

    def __init__(self, acq: AcquisitionConfig, spectrum: FatSpectrum, indices: Sequence[int]):
        self.indices = tuple(indices)
        self.times = acq.times[np.asarray(self.indices) - 1]
        self.a = fat_modulations(spectrum, acq, self.indices)
        design = np.stack([np.ones_like(self.a), self.a], axis=1)

        singular = np.linalg.svd(design, compute_uv=False)
        if len(self.indices) < 2 or singular[-1] <= 1e-10 * singular[0]:
            raise RankDeficientBasisError(
                f"Water and fat basis is rank deficient for echoes {list(self.indices)}"
            )
        self.q, self.r = np.linalg.qr(design)
        self.period = 2.0 * math.pi / acq.effective_spacing(self.indices)

    @classmethod
    def for_subset(cls, acq: AcquisitionConfig, spectrum: FatSpectrum,
                   subset: Union[EchoSubset, Sequence[int]]) -> "VarproBasis":
        if isinstance(subset, EchoSubset):
            indices = subset.validate(acq.n_echoes).indices
        else:
            indices = validate_echo_subset(subset, acq.n_echoes).indices
        return cls(acq, spectrum, indices)

    def grid(self, size: int = 64) -> np.ndarray:
        """Field samples -P/2 + k P/size, k = 0..size-1."""
        return -self.period / 2.0 + np.arange(size) * self.period / size

    def residuals_at(self, signals: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """
        Residual per voxel at a per-voxel field value.

        Args:
            signals: [K, V] complex
            omega: [V] rad/s
        """
        demod = signals * np.exp(-1j * np.multiply.outer(self.times, omega))
        coef = self.q.conj().T @ demod
        rest = demod - self.q @ coef
        return np.maximum((rest.real ** 2 + rest.imag ** 2).sum(axis=0), 0.0)

    def residual_curves(self, signals: np.ndarray, omegas: np.ndarray) -> np.ndarray:
        """
        Residual of every voxel at every grid field value.

        Args:
            signals: [K, V] complex
            omegas: [G] rad/s

        Returns:
            [V, G] non-negative residuals
        """
        phase = np.exp(-1j * np.multiply.outer(omegas, self.times))  # [G, K]
        demod = phase[:, :, None] * signals[None]  # [G, K, V]
        coef = np.einsum("kj,gkv->gjv", self.q.conj(), demod)
        rest = demod - np.einsum("kj,gjv->gkv", self.q, coef)
        curves = (rest.real ** 2 + rest.imag ** 2).sum(axis=1)
        return np.maximum(curves, 0.0).T

    def amplitudes(self, signals: np.ndarray, omega: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Complex least-squares water and fat amplitudes at fixed field."""
        demod = signals * np.exp(-1j * np.multiply.outer(self.times, omega))
        coef = np.linalg.solve(self.r, self.q.conj().T @ demod)
        return coef[0], coef[1]


def varpro_residual(
    s: np.ndarray,
    omega: float,
    acq: AcquisitionConfig,
    spectrum: FatSpectrum,
    subset: Union[EchoSubset, Sequence[int], None] = None,
) -> float:
    """
    Squared distance of the echo vector `s` (one entry per used echo) from
    the water/fat model subspace at field `omega`.
    """
    subset = subset if subset is not None else reference_echo_subset(acq.n_echoes)
    basis = VarproBasis.for_subset(acq, spectrum, subset)
    s = np.asarray(s, dtype=np.complex128).reshape(-1, 1)
    if s.shape[0] != len(basis.indices):
        raise ShapeError("varpro_residual", "K", f"{s.shape[0]} samples for {len(basis.indices)} echoes")
    return float(basis.residuals_at(s, np.asarray([omega]))[0])


def residual_curve(
    s: np.ndarray,
    acq: AcquisitionConfig,
    spectrum: FatSpectrum,
    subset: Union[EchoSubset, Sequence[int], None] = None,
    grid_size: int = 64,
) -> Tuple[np.ndarray, np.ndarray]:
    """Grid field values and residuals for one voxel's echo vector."""
    subset = subset if subset is not None else reference_echo_subset(acq.n_echoes)
    basis = VarproBasis.for_subset(acq, spectrum, subset)
    omegas = basis.grid(grid_size)
    s = np.asarray(s, dtype=np.complex128).reshape(-1, 1)
    return omegas, basis.residual_curves(s, omegas)[0]


# =============================================================================
# Candidates
# =============================================================================

def _candidates(curves: np.ndarray, omegas: np.ndarray, max_candidates: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized local-minimum detection on circular grids.

    Args:
        curves: [V, G]
        omegas: [G] uniformly spaced grid

    Returns:
        (candidate omegas [V, C], candidate residuals [V, C]); unused slots
        carry residual = inf. Candidates are ordered by residual ascending.
    """
    n_vox, size = curves.shape
    step = omegas[1] - omegas[0] if size > 1 else 0.0
    left = np.roll(curves, 1, axis=1)
    right = np.roll(curves, -1, axis=1)
    is_min = (curves <= left) & (curves < right)

    # Constant curves have no strict minimum; fall back to sample 0
    no_min = ~is_min.any(axis=1)
    if no_min.any():
        is_min[no_min, 0] = True

    denom = left - 2.0 * curves + right
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(denom > 0, 0.5 * (left - right) / denom, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    refined_omega = omegas[None, :] + delta * step
    refined_value = np.maximum(curves - 0.25 * (left - right) * delta, 0.0)

    values = np.where(is_min, refined_value, np.inf)
    order = np.argsort(values, axis=1, kind="stable")[:, :max_candidates]
    cand_res = np.take_along_axis(values, order, axis=1)
    cand_omega = np.take_along_axis(refined_omega, order, axis=1)
    if cand_res.shape[1] < max_candidates:
        pad = max_candidates - cand_res.shape[1]
        cand_res = np.pad(cand_res, ((0, 0), (0, pad)), constant_values=np.inf)
        cand_omega = np.pad(cand_omega, ((0, 0), (0, pad)))
    return cand_omega, cand_res


def field_candidates(
    curve: np.ndarray,
    omegas: np.ndarray,
    max_candidates: Optional[int] = None,
) -> List[FieldCandidate]:
    """
    Refined local minima of one residual curve sampled over a full period.

    Each minimum is refined by one parabolic-interpolation step. The result
    is sorted by residual, ascending. A constant curve yields the single
    candidate at sample 0.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if not np.all(np.isfinite(curve)):
        raise ValueError("residual curve must be finite")
    limit = max_candidates or curve.size
    cand_omega, cand_res = _candidates(curve[None, :], np.asarray(omegas, dtype=np.float64), limit)
    return [
        FieldCandidate(omega=float(w), residual=float(r))
        for w, r in zip(cand_omega[0], cand_res[0])
        if np.isfinite(r)
    ]


# =============================================================================
# Field Resolution
# =============================================================================

def _pool_curves(curves: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 sum-pooling of [H, W, G] curves; odd extents are zero padded."""
    h, w, g = curves.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        curves = np.pad(curves, ((0, ph), (0, pw), (0, 0)))
        mask = np.pad(mask, ((0, ph), (0, pw)))
    h2, w2 = curves.shape[0] // 2, curves.shape[1] // 2
    masked = curves * mask[..., None]
    pooled = masked.reshape(h2, 2, w2, 2, g).sum(axis=(1, 3))
    pooled_mask = mask.reshape(h2, 2, w2, 2).any(axis=(1, 3))
    return pooled, pooled_mask


_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _shift(array: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """out[i, j] = array[i + dy, j + dx], `fill` outside."""
    out = np.full_like(array, fill)
    h, w = array.shape[:2]
    ys_out = slice(max(0, -dy), min(h, h - dy))
    xs_out = slice(max(0, -dx), min(w, w - dx))
    ys_in = slice(max(0, dy), min(h, h + dy))
    xs_in = slice(max(0, dx), min(w, w + dx))
    out[ys_out, xs_out] = array[ys_in, xs_in]
    return out


class _LabelField:
    """Candidate labelling of one pyramid level."""

    def __init__(self, cand_omega: np.ndarray, cand_cost: np.ndarray, mask: np.ndarray,
                 period: float, smoothness: float):
        self.cand_omega = cand_omega  # [H, W, C]
        self.cand_cost = cand_cost  # [H, W, C], inf for unused slots
        self.mask = mask
        self.period = period
        self.weight = smoothness / period
        h, w, _ = cand_omega.shape
        self.label = np.zeros((h, w), dtype=np.int64)
        self.wrap = np.zeros((h, w), dtype=np.int64)

    @property
    def omega(self) -> np.ndarray:
        base = np.take_along_axis(self.cand_omega, self.label[..., None], axis=2)[..., 0]
        return np.where(self.mask, base + self.wrap * self.period, 0.0)

    def _neighbour_terms(self, omega: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        values = [_shift(omega, dy, dx, 0.0) for dy, dx in _NEIGHBOURS]
        present = [_shift(self.mask, dy, dx, False) for dy, dx in _NEIGHBOURS]
        return values, present

    def _option_costs(self, omega: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cost of every (candidate, wrap) option given the current neighbours."""
        values, present = self._neighbour_terms(omega)
        count = sum(p.astype(np.float64) for p in present)
        total = sum(np.where(p, v, 0.0) for v, p in zip(values, present))
        with np.errstate(invalid="ignore", divide="ignore"):
            centre = np.where(count > 0, total / np.maximum(count, 1.0), omega)

        m0 = np.rint((centre[..., None] - self.cand_omega) / self.period)
        wraps = m0[..., None] + np.array([-1.0, 0.0, 1.0])  # [H, W, C, 3]
        options = self.cand_omega[..., None] + wraps * self.period

        smooth = np.zeros_like(options)
        for v, p in zip(values, present):
            smooth += np.where(p[..., None, None], np.abs(options - v[..., None, None]), 0.0)
        cost = self.cand_cost[..., None] + self.weight * smooth
        return cost, wraps, count

    def current_cost(self, omega: np.ndarray) -> np.ndarray:
        values, present = self._neighbour_terms(omega)
        data = np.take_along_axis(self.cand_cost, self.label[..., None], axis=2)[..., 0]
        smooth = sum(np.where(p, np.abs(omega - v), 0.0) for v, p in zip(values, present))
        return data + self.weight * smooth

    def icm(self, max_iters: int) -> Tuple[bool, int]:
        """
        Red-black iterated conditional modes.

        Same-coloured voxels share no 4-neighbour, so each half-sweep is a
        valid simultaneous update. Returns (converged, sweeps).
        """
        h, w = self.mask.shape
        parity = np.add.outer(np.arange(h), np.arange(w)) % 2
        for sweep in range(1, max_iters + 1):
            changed = 0
            for color in (0, 1):
                active = self.mask & (parity == color)
                if not active.any():
                    continue
                omega = self.omega
                cost, wraps, _ = self._option_costs(omega)
                flat = cost.reshape(h, w, -1)
                best = flat.argmin(axis=2)
                best_cost = np.take_along_axis(flat, best[..., None], axis=2)[..., 0]
                current = self.current_cost(omega)
                with np.errstate(invalid="ignore"):
                    improve = active & (best_cost < current - 1e-12 * np.maximum(1.0, np.abs(current)))
                if improve.any():
                    n_wraps = wraps.shape[-1]
                    new_label = best // n_wraps
                    new_wrap = np.take_along_axis(
                        wraps.reshape(h, w, -1), best[..., None], axis=2
                    )[..., 0].astype(np.int64)
                    self.label = np.where(improve, new_label, self.label)
                    self.wrap = np.where(improve, new_wrap, self.wrap)
                    changed += int(improve.sum())
            if changed == 0:
                return True, sweep
        return False, max_iters

    def grow(self) -> None:
        """
        Initial labelling by region growing from the most confident voxel of
        each connected component.
        """
        h, w = self.mask.shape
        best = self.cand_cost[..., 0]
        assigned = np.zeros_like(self.mask)
        omega = np.zeros((h, w))
        order = np.argsort(np.where(self.mask, best, np.inf), axis=None, kind="stable")

        for seed in order:
            y, x = divmod(int(seed), w)
            if not self.mask[y, x]:
                break
            if assigned[y, x]:
                continue
            self.label[y, x] = 0
            self.wrap[y, x] = 0
            omega[y, x] = self.cand_omega[y, x, 0]
            assigned[y, x] = True
            queue = deque([(y, x)])
            while queue:
                cy, cx = queue.popleft()
                for dy, dx in _NEIGHBOURS:
                    ny, nx = cy + dy, cx + dx
                    if not (0 <= ny < h and 0 <= nx < w) or not self.mask[ny, nx] or assigned[ny, nx]:
                        continue
                    self._assign_from_neighbours(ny, nx, omega, assigned)
                    assigned[ny, nx] = True
                    queue.append((ny, nx))

    def _assign_from_neighbours(self, y: int, x: int, omega: np.ndarray, assigned: np.ndarray) -> None:
        h, w = self.mask.shape
        nbrs = [
            omega[y + dy, x + dx]
            for dy, dx in _NEIGHBOURS
            if 0 <= y + dy < h and 0 <= x + dx < w and assigned[y + dy, x + dx]
        ]
        centre = float(np.mean(nbrs))
        best_cost = np.inf
        for c in range(self.cand_omega.shape[2]):
            data = self.cand_cost[y, x, c]
            if not np.isfinite(data):
                continue
            m0 = round((centre - self.cand_omega[y, x, c]) / self.period)
            for m in (m0 - 1, m0, m0 + 1):
                value = self.cand_omega[y, x, c] + m * self.period
                cost = data + self.weight * sum(abs(value - n) for n in nbrs)
                if cost < best_cost:
                    best_cost = cost
                    self.label[y, x] = c
                    self.wrap[y, x] = m
                    omega[y, x] = value

    def snap_to(self, guide: np.ndarray) -> None:
        """Pick for each voxel the (candidate, wrap) nearest to `guide`."""
        wraps = np.rint((guide[..., None] - self.cand_omega) / self.period)
        distance = np.abs(self.cand_omega + wraps * self.period - guide[..., None])
        distance = np.where(np.isfinite(self.cand_cost), distance, np.inf)
        self.label = distance.argmin(axis=2)
        self.wrap = np.take_along_axis(wraps, self.label[..., None], axis=2)[..., 0].astype(np.int64)


def _level_candidates(curves: np.ndarray, mask: np.ndarray, omegas: np.ndarray,
                      max_candidates: int) -> Tuple[np.ndarray, np.ndarray]:
    h, w, g = curves.shape
    cand_omega = np.zeros((h, w, max_candidates))
    cand_res = np.full((h, w, max_candidates), np.inf)
    if mask.any():
        co, cr = _candidates(curves[mask], omegas, max_candidates)
        cand_omega[mask] = co
        cand_res[mask] = cr
    return cand_omega, cand_res


def resolve_field_map(
    curves: np.ndarray,
    mask: np.ndarray,
    omegas: np.ndarray,
    period: float,
    smoothness: float = 1.0,
    levels: int = 3,
    max_iters: int = 50,
    max_candidates: int = 4,
) -> FieldMap:
    """
    Coarse-to-fine selection of a smooth field from per-voxel candidates.

    Args:
        curves: Residual curves [H, W, G] over one period
        mask: Voxels to resolve [H, W]
        omegas: Grid field values [G]
        period: Ambiguity period (rad/s)
        smoothness: Weight of sum |w_i - w_j| / period over 4-neighbours, in
            units of the median per-voxel mean residual
        levels: Number of 2x sum-pooling steps
        max_iters: ICM sweep limit per level

    Returns:
        FieldMap; voxels of a level that hit max_iters carry FLAG_NOT_CONVERGED
    """
    mask = np.asarray(mask, dtype=bool)
    if curves.shape[:2] != mask.shape:
        raise ShapeError("resolve_field_map", "mask", f"{mask.shape} != {curves.shape[:2]}")
    flags = np.where(mask, 0, FLAG_BACKGROUND).astype(np.int32)
    if not mask.any():
        return FieldMap(omega=np.zeros(mask.shape), flags=flags)

    pyramid = [(curves, mask)]
    for _ in range(levels):
        c, m = pyramid[-1]
        if min(c.shape[:2]) < 2:
            break
        pyramid.append(_pool_curves(c, m))

    guide: Optional[np.ndarray] = None
    converged_all = True
    iterations: List[int] = []
    field_omega = np.zeros(mask.shape)
    for depth in range(len(pyramid) - 1, -1, -1):
        level_curves, level_mask = pyramid[depth]
        cand_omega, cand_res = _level_candidates(level_curves, level_mask, omegas, max_candidates)
        scale = float(np.median(level_curves[level_mask].mean(axis=1)))
        if not np.isfinite(scale) or scale <= 0:
            scale = 1.0
        labels = _LabelField(cand_omega, cand_res / scale, level_mask, period, smoothness)

        if guide is None:
            labels.grow()
        else:
            h, w = level_mask.shape
            up = np.repeat(np.repeat(guide, 2, axis=0), 2, axis=1)[:h, :w]
            labels.snap_to(up)

        converged, sweeps = labels.icm(max_iters)
        iterations.append(sweeps)
        if not converged:
            converged_all = False
            logger.warning(f"resolve_field_map: level {depth} did not converge in {max_iters} sweeps")
            if depth == 0:
                flags[level_mask] |= FLAG_NOT_CONVERGED

        guide = labels.omega
        if depth == 0:
            field_omega = guide

    # Keep the global period offset canonical: median over the mask in [-P/2, P/2)
    shift = np.floor(np.median(field_omega[mask]) / period + 0.5)
    field_omega = np.where(mask, field_omega - shift * period, 0.0)
    return FieldMap(omega=field_omega, flags=flags, converged=converged_all, iterations=iterations)


def polish_field(basis: VarproBasis, signals: np.ndarray, omega: np.ndarray,
                 step: float, rounds: int) -> np.ndarray:
    """Per-voxel parabolic refinement with a shrinking bracket."""
    omega = omega.copy()
    h = step
    for _ in range(rounds):
        h /= 4.0
        r_minus = basis.residuals_at(signals, omega - h)
        r_zero = basis.residuals_at(signals, omega)
        r_plus = basis.residuals_at(signals, omega + h)
        denom = r_minus - 2.0 * r_zero + r_plus
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.where(denom > 0, 0.5 * (r_minus - r_plus) / denom, 0.0)
        omega += np.clip(delta, -1.0, 1.0) * h
    return omega


# =============================================================================
# Full Separation
# =============================================================================

def magnitude_mask(echoes: EchoSeries, indices: Sequence[int], threshold: float) -> np.ndarray:
    """Voxels whose root-sum-of-squares magnitude exceeds threshold * scan max."""
    rss = np.sqrt((np.abs(echoes.data[np.asarray(indices) - 1]) ** 2).sum(axis=0))
    peak = rss.max() if rss.size else 0.0
    if peak <= 0:
        return np.zeros(rss.shape, dtype=bool)
    return rss > threshold * peak


def _separate_slice(
    signals: np.ndarray,
    mask: np.ndarray,
    basis: VarproBasis,
    cfg: ReferenceConfig,
) -> Tuple[np.ndarray, np.ndarray, FieldMap, np.ndarray]:
    k, h, w = signals.shape
    omegas = basis.grid(cfg.grid_size)
    curves = np.zeros((h, w, cfg.grid_size))
    if mask.any():
        curves[mask] = basis.residual_curves(signals[:, mask], omegas)

    field_map = resolve_field_map(
        curves, mask, omegas, basis.period,
        smoothness=cfg.smoothness,
        levels=cfg.levels,
        max_iters=cfg.max_iters,
        max_candidates=cfg.max_candidates,
    )

    water_c = np.zeros((h, w), dtype=np.complex128)
    fat_c = np.zeros((h, w), dtype=np.complex128)
    residual = np.zeros((h, w))
    if mask.any():
        voxels = signals[:, mask]
        omega = polish_field(basis, voxels, field_map.omega[mask], omegas[1] - omegas[0], cfg.refine_rounds)
        field_map.omega[mask] = omega
        water_c[mask], fat_c[mask] = basis.amplitudes(voxels, omega)
        residual[mask] = basis.residuals_at(voxels, omega)
    return np.abs(water_c), np.abs(fat_c), field_map, residual


def separate(
    echoes: EchoSeries,
    mask: Optional[np.ndarray] = None,
    cfg: Optional[ReferenceConfig] = None,
    spectrum: Optional[FatSpectrum] = None,
) -> SeparationResult:
    """
    Reference separation of a slice [N, H, W] or volume [N, Z, H, W].

    Slices are processed independently. Voxels outside the mask, or with
    W + F below background_eps times the scan maximum, are background:
    FF = 0 and FLAG_BACKGROUND set.

    Args:
        echoes: Complex echo series
        mask: Foreground voxels (default: magnitude threshold)
        cfg: Reference configuration
        spectrum: Fat spectrum (default six-peak)

    Returns:
        SeparationResult with arrays shaped like one echo
    """
    cfg = cfg or ReferenceConfig()
    spectrum = spectrum or FatSpectrum.default()
    subset = cfg.echo_subset(echoes.n_echoes)
    basis = VarproBasis(echoes.acquisition, spectrum, subset.indices)

    if mask is None:
        mask = magnitude_mask(echoes, subset.indices, cfg.mask_threshold)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != echoes.spatial_shape:
        raise ShapeError("separate", "mask", f"{mask.shape} != {echoes.spatial_shape}")

    volume = echoes.data.ndim == 4
    data = echoes.data if volume else echoes.data[:, None]
    vol_mask = mask if volume else mask[None]
    used = data[np.asarray(subset.indices) - 1]

    n_slices = data.shape[1]
    shape = data.shape[1:]
    water = np.zeros(shape)
    fat = np.zeros(shape)
    omega = np.zeros(shape)
    residual = np.zeros(shape)
    flags = np.zeros(shape, dtype=np.int32)
    converged = True
    iterations: List[int] = []
    for z in range(n_slices):
        w_z, f_z, fm, r_z = _separate_slice(used[:, z], vol_mask[z], basis, cfg)
        water[z], fat[z], omega[z], residual[z], flags[z] = w_z, f_z, fm.omega, r_z, fm.flags
        converged &= fm.converged
        iterations.extend(fm.iterations)

    total = water + fat
    scan_max = float(total[vol_mask].max()) if vol_mask.any() else 0.0
    background = ~vol_mask | (total < cfg.background_eps * scan_max) | (total <= 0)
    flags[background] |= FLAG_BACKGROUND

    with np.errstate(divide="ignore", invalid="ignore"):
        raw_ff = np.where(background, 0.0, fat / np.where(total > 0, total, 1.0))
    ff = clamp_ff(raw_ff)

    if not volume:
        water, fat, omega, residual, flags = water[0], fat[0], omega[0], residual[0], flags[0]
        ff = FatFractionMap(ff.values[0])
    ff.mask = ~(background if volume else background[0])

    logger.debug(
        f"separate: {n_slices} slice(s), {int(background.sum())} background voxels, converged={converged}"
    )
    return SeparationResult(
        water=water,
        fat=fat,
        ff=ff,
        field=FieldMap(omega=omega, flags=flags, converged=converged, iterations=iterations),
        residual=residual,
        mask=mask,
    )


def foreground_mae(result: SeparationResult, truth_ff: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute FF error over `mask`."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("foreground_mae: empty mask")
    return float(np.abs(result.ff.values[mask] - truth_ff[mask]).mean())


# =============================================================================
# Dataset Driver
# =============================================================================

def separate_subject_job(
    dataset_dir: str,
    out_dir: str,
    reference_config: Dict[str, Any],
    spectrum: Optional[Dict[str, Any]],
    subject_id: str,
) -> Dict[str, Any]:
    """
    Separate one stored subject and write its reference maps.

    Returns:
        Per-subject summary: FF MAE over the body against phantom truth,
        flagged-voxel counts, convergence
    """
    cfg = ReferenceConfig.model_validate(reference_config)
    fat_spectrum = FatSpectrum.model_validate(spectrum) if spectrum else FatSpectrum.default()
    subject = load_subject(dataset_dir, subject_id)
    result = separate(subject.echoes, cfg=cfg, spectrum=fat_spectrum)

    mae = foreground_mae(result, subject.truth_ff, subject.body_mask)
    summary = {
        "subject_id": subject_id,
        "ff_mae": mae,
        "background_voxels": result.background_count,
        "not_converged_voxels": int(np.count_nonzero(result.flags & FLAG_NOT_CONVERGED)),
        "converged": result.field.converged,
        "echoes": list(cfg.echo_subset(subject.echoes.n_echoes).indices),
    }
    write_reference(out_dir, subject_id, {
        "ff": result.ff.values,
        "water": result.water,
        "fat": result.fat,
        "field": result.field.omega,
        "residual": result.residual,
        "flags": result.flags,
    }, {"ff_mae": mae, "echoes": summary["echoes"]})
    report(f"Reference {subject_id}: FF MAE {mae:.5f}")
    return summary


def run_reference(
    dataset_dir: Union[str, Path],
    out_dir: Union[str, Path],
    cfg: Optional[ReferenceConfig] = None,
    spectrum: Optional[FatSpectrum] = None,
    workers: Optional[int] = None,
    dispatch: Optional[Callable[[str], Dict[str, Any]]] = None,
) -> Dict[str, Any]:
    """
    Reference separation for every subject of a dataset.

    Args:
        dataset_dir: Dataset root
        out_dir: Reference output root
        cfg: Reference configuration
        spectrum: Fat spectrum
        workers: Worker cap for local per-subject parallelism
        dispatch: Runs one subject elsewhere and returns its summary

    Returns:
        Summary written to <out_dir>/summary.json
    """
    cfg = cfg or ReferenceConfig()
    manifest = read_manifest(dataset_dir)
    spectrum_dump = spectrum.model_dump() if spectrum else None

    def run(subject_id: str) -> Dict[str, Any]:
        if dispatch is not None:
            return dispatch(subject_id)
        return separate_subject_job(str(dataset_dir), str(out_dir), cfg.model_dump(), spectrum_dump, subject_id)

    subjects = WorkerPool(workers).map(run, manifest.subject_ids)
    summary = {
        "method": REFERENCE_METHOD,
        "mean_ff_mae": float(np.mean([s["ff_mae"] for s in subjects])),
        "max_ff_mae": float(np.max([s["ff_mae"] for s in subjects])),
        "subjects": subjects,
    }
    atomic_write_json(Path(out_dir) / "summary.json", summary)
    logger.info(f"Reference separation: {len(subjects)} subjects, mean FF MAE {summary['mean_ff_mae']:.5f}")
    return summary

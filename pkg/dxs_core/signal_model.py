"""
Multi-peak bipolar gradient-echo signal model.

Forward synthesis of complex echoes from water, fat, field, R2* and the
bipolar polarity term; water/fat recovery from a fat-fraction map; fat
fraction clamping; network input preparation.

Units: echo times in seconds, field in rad/s, R2* in 1/s, chemical shifts in
ppm relative to water (applied as ppm * 1e-6).
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dxs_core.autodiff import Tensor
from dxs_graph.errors import EchoSubsetError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


# Proton gyromagnetic ratio (rad/s/T)
GAMMA = 2.0 * math.pi * 42.577478518e6

# Denominators of the FF -> W/F inversion below this magnitude are flagged
DENOMINATOR_EPS = 1e-9


# =============================================================================
# Configuration Models
# =============================================================================

class AcquisitionConfig(BaseModel):
    """
    Echo train of the bipolar multi-echo acquisition.

    Echo n (1-based) is acquired at echo_times[n-1] and carries the factor
    (-1)^n on the polarity term theta. If echo_times is omitted it is built
    from te1, delta_te and n_echoes.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    b0: float = Field(1.5, gt=0, description="Field strength (T)")
    gamma: float = Field(GAMMA, gt=0, description="Gyromagnetic ratio (rad/s/T)")
    te1: float = Field(1.37e-3, gt=0, description="First echo time (s)")
    delta_te: float = Field(0.95e-3, gt=0, description="Echo spacing (s)")
    n_echoes: int = Field(5, ge=1, le=32)
    echo_times: Optional[List[float]] = None

    @model_validator(mode="after")
    def _fill_echo_times(self) -> "AcquisitionConfig":
        if self.echo_times is None:
            times = [self.te1 + i * self.delta_te for i in range(self.n_echoes)]
            object.__setattr__(self, "echo_times", times)
        else:
            if len(self.echo_times) != self.n_echoes:
                object.__setattr__(self, "n_echoes", len(self.echo_times))
            if not self.echo_times:
                raise ValueError("echo_times must not be empty")
        times = self.echo_times
        if any(t <= 0 for t in times):
            raise ValueError("echo_times must all be > 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("echo_times must be strictly increasing")
        return self

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.echo_times, dtype=np.float64)

    def polarity(self, n: int) -> int:
        """Sign (-1)^n applied to theta for 1-based echo n."""
        return -1 if n % 2 else 1

    def effective_spacing(self, indices: Sequence[int]) -> float:
        """Echo spacing of a uniformly spaced subset (2*delta_te for odd echoes)."""
        if len(indices) < 2:
            return self.delta_te
        times = self.times[np.asarray(indices) - 1]
        return float(times[1] - times[0])


class FatSpectrum(BaseModel):
    """
    Multi-peak fat spectrum: relative amplitudes and chemical shifts (ppm).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    amplitudes: List[float] = Field(default_factory=lambda: [0.088, 0.700, 0.120, 0.006, 0.039, 0.047])
    shifts_ppm: List[float] = Field(default_factory=lambda: [-3.80, -3.40, -2.60, -1.95, -0.50, 0.60])

    @model_validator(mode="after")
    def _check_peaks(self) -> "FatSpectrum":
        if len(self.amplitudes) != len(self.shifts_ppm):
            raise ValueError("amplitudes and shifts_ppm must have the same length")
        if not self.amplitudes:
            raise ValueError("spectrum needs at least one peak")
        if any(a < 0 for a in self.amplitudes):
            raise ValueError("peak amplitudes must be >= 0")
        total = math.fsum(self.amplitudes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"peak amplitudes must sum to 1 (got {total})")
        return self

    @property
    def n_peaks(self) -> int:
        return len(self.amplitudes)

    @classmethod
    def default(cls) -> "FatSpectrum":
        """Six-peak liver fat spectrum."""
        return cls()

    @classmethod
    def single_peak(cls, shift_ppm: float = -3.40) -> "FatSpectrum":
        return cls(amplitudes=[1.0], shifts_ppm=[shift_ppm])

    @classmethod
    def three_peak(cls) -> "FatSpectrum":
        """Default spectrum with neighbouring peaks merged pairwise."""
        return cls.default().merged([(0, 1), (2, 3), (4, 5)])

    @classmethod
    def preset(cls, name: str) -> "FatSpectrum":
        presets = {
            "default": cls.default,
            "six_peak": cls.default,
            "single_peak": cls.single_peak,
            "three_peak": cls.three_peak,
        }
        if name not in presets:
            raise ValueError(f"Unknown fat spectrum preset '{name}' (choose from {sorted(presets)})")
        return presets[name]()

    def merged(self, groups: Sequence[Sequence[int]]) -> "FatSpectrum":
        """Collapse peak groups into single peaks at their amplitude-weighted shift."""
        amplitudes = []
        shifts = []
        for group in groups:
            amps = [self.amplitudes[i] for i in group]
            total = math.fsum(amps)
            amplitudes.append(total)
            shifts.append(math.fsum(a * self.shifts_ppm[i] for a, i in zip(amps, group)) / total)
        return FatSpectrum(amplitudes=amplitudes, shifts_ppm=shifts)


# =============================================================================
# Data Carriers
# =============================================================================

@dataclass
class VoxelModel:
    """Ground-truth parameters of one voxel."""
    water: float
    fat: float
    phase0: float = 0.0
    omega: float = 0.0
    r2s: float = 0.0
    theta: complex = 0j

    def __post_init__(self):
        if self.water < 0 or self.fat < 0 or self.r2s < 0:
            raise ValueError("water, fat and r2s must be non-negative")


@dataclass
class EchoSeries:
    """
    Complex multi-echo images, shape [N_echo, H, W] or [N_echo, Z, H, W].

    `scale` is the normalization divisor already applied (1.0 for raw data).
    """
    data: np.ndarray
    acquisition: AcquisitionConfig
    scale: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim not in (3, 4):
            raise ShapeError("EchoSeries", "rank", f"expected [N,H,W] or [N,Z,H,W], got {self.data.shape}")
        if self.data.shape[0] != self.acquisition.n_echoes:
            raise ShapeError(
                "EchoSeries", "N_echo",
                f"{self.data.shape[0]} echoes but acquisition defines {self.acquisition.n_echoes}",
            )

    @property
    def n_echoes(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def n_slices(self) -> int:
        return self.data.shape[1] if self.data.ndim == 4 else 1

    def slice(self, z: int) -> "EchoSeries":
        """Single-slice view [N_echo, H, W] of a volume series."""
        if self.data.ndim == 3:
            if z != 0:
                raise IndexError(f"slice {z} out of range for single-slice series")
            return self
        return EchoSeries(self.data[:, z], self.acquisition, self.scale)


@dataclass
class FatFractionMap:
    """Fat fraction values in [0, 1] with an optional foreground mask."""
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("fat fraction values must lie in [0, 1]")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ShapeError("FatFractionMap", "mask", f"{self.mask.shape} != {self.values.shape}")


@dataclass
class WaterFatImages:
    """Water and fat magnitudes recovered from a fat-fraction map."""
    water: np.ndarray
    fat: np.ndarray
    flagged: Optional[np.ndarray] = None

    @property
    def flagged_count(self) -> int:
        return 0 if self.flagged is None else int(np.count_nonzero(self.flagged))


# =============================================================================
# Echo Subsets
# =============================================================================

EchoFamily = Literal["all", "odd", "even"]


@dataclass(frozen=True)
class EchoSubset:
    """
    Echo selection: the first `count` echoes of a parity family.

    all:k -> {1..k}, odd:k -> {1,3,..}, even:k -> {2,4,..}.
    """
    family: EchoFamily
    count: int

    def __post_init__(self):
        if self.family not in ("all", "odd", "even"):
            raise EchoSubsetError((), f"unknown echo family '{self.family}'")
        if self.count < 1:
            raise EchoSubsetError((), f"echo count must be >= 1, got {self.count}")

    @classmethod
    def parse(cls, text: str) -> "EchoSubset":
        """Parse the CLI form 'family:count', e.g. 'all:5' or 'odd:3'."""
        family, sep, count = text.strip().partition(":")
        if not sep:
            raise EchoSubsetError((), f"expected 'family:count', got '{text}'")
        try:
            n = int(count)
        except ValueError:
            raise EchoSubsetError((), f"echo count '{count}' is not an integer") from None
        return cls(family.lower(), n)

    @property
    def indices(self) -> Tuple[int, ...]:
        if self.family == "all":
            return tuple(range(1, self.count + 1))
        start = 1 if self.family == "odd" else 2
        return tuple(start + 2 * i for i in range(self.count))

    @property
    def label(self) -> str:
        return f"{self.family}:{self.count}"

    def validate(self, n_echoes: int) -> "EchoSubset":
        if max(self.indices) > n_echoes:
            raise EchoSubsetError(self.indices, f"only {n_echoes} echoes available")
        return self

    def __str__(self) -> str:
        return self.label


def validate_echo_subset(indices: Sequence[int], n_echoes: int) -> EchoSubset:
    """
    Check that `indices` is a legal subset and return it as an EchoSubset.

    Legal subsets start at the first echo of their family and continue with
    consecutive members of it.
    """
    indices = tuple(int(i) for i in indices)
    if not indices:
        raise EchoSubsetError(indices, "subset is empty")
    if any(i < 1 or i > n_echoes for i in indices):
        raise EchoSubsetError(indices, f"indices must lie in 1..{n_echoes}")
    for family in ("all", "odd", "even"):
        candidate = EchoSubset(family, len(indices))
        if candidate.indices == indices:
            return candidate
    raise EchoSubsetError(indices, "not a consecutive all/odd/even prefix")


def reference_echo_subset(n_echoes: int) -> EchoSubset:
    """All odd-numbered echoes, used for reference separation."""
    return EchoSubset("odd", (n_echoes + 1) // 2)


def benchmark_echo_configurations(n_echoes: int) -> List[EchoSubset]:
    """Every legal subset: all:1..N, odd prefixes, even prefixes."""
    configs = [EchoSubset("all", k) for k in range(1, n_echoes + 1)]
    configs += [EchoSubset("odd", k) for k in range(1, (n_echoes + 1) // 2 + 1)]
    configs += [EchoSubset("even", k) for k in range(1, n_echoes // 2 + 1)]
    return configs


def _as_indices(subset: Union[EchoSubset, Sequence[int]], n_echoes: int) -> Tuple[int, ...]:
    if isinstance(subset, EchoSubset):
        return subset.validate(n_echoes).indices
    return validate_echo_subset(subset, n_echoes).indices


# =============================================================================
# Forward Model
# =============================================================================

def fat_modulation(spectrum: FatSpectrum, t, acq: AcquisitionConfig):
    """
    Complex fat modulation a(t) = sum_m alpha_m * exp(i*gamma*B0*delta_m*1e-6*t).

    Accepts a scalar or array of times; returns complex of the same shape.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("echo time must be >= 0")
    amps = np.asarray(spectrum.amplitudes, dtype=np.float64)
    freqs = acq.gamma * acq.b0 * np.asarray(spectrum.shifts_ppm, dtype=np.float64) * 1e-6
    phases = np.multiply.outer(t_arr, freqs)
    value = (amps * np.exp(1j * phases)).sum(axis=-1)
    if np.ndim(t) == 0:
        return complex(value)
    return value


def fat_modulations(spectrum: FatSpectrum, acq: AcquisitionConfig,
                    indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """a_n for the given 1-based echo indices (all echoes by default)."""
    times = acq.times if indices is None else acq.times[np.asarray(indices) - 1]
    return fat_modulation(spectrum, times, acq)


def synthesize_echo(v: VoxelModel, n: int, spectrum: FatSpectrum, acq: AcquisitionConfig) -> complex:
    """S_n = (W + a_n F) * exp(i*phi0 + (i*omega - R2*) t_n + (-1)^n theta)."""
    if n < 1 or n > acq.n_echoes:
        raise IndexError(f"echo index {n} outside 1..{acq.n_echoes}")
    t = acq.echo_times[n - 1]
    a = fat_modulation(spectrum, t, acq)
    exponent = 1j * v.phase0 + (1j * v.omega - v.r2s) * t + acq.polarity(n) * v.theta
    return complex((v.water + a * v.fat) * np.exp(exponent))


def synthesize_series(
    water: np.ndarray,
    fat: np.ndarray,
    spectrum: FatSpectrum,
    acq: AcquisitionConfig,
    phase0=0.0,
    field=0.0,
    r2s=0.0,
    theta=0j,
) -> EchoSeries:
    """
    Vectorized forward model over a map of voxels.

    Parameter maps broadcast against `water`; the result has shape
    [N_echo, *water.shape].
    """
    water = np.asarray(water, dtype=np.float64)
    fat = np.asarray(fat, dtype=np.float64)
    phase0 = np.broadcast_to(np.asarray(phase0, dtype=np.float64), water.shape)
    field_map = np.broadcast_to(np.asarray(field, dtype=np.float64), water.shape)
    r2s = np.broadcast_to(np.asarray(r2s, dtype=np.float64), water.shape)
    theta = np.broadcast_to(np.asarray(theta, dtype=np.complex128), water.shape)

    a = fat_modulations(spectrum, acq)
    data = np.empty((acq.n_echoes,) + water.shape, dtype=np.complex128)
    for i, t in enumerate(acq.times):
        n = i + 1
        exponent = 1j * phase0 + (1j * field_map - r2s) * t + acq.polarity(n) * theta
        data[i] = (water + a[i] * fat) * np.exp(exponent)
    return EchoSeries(data, acq)


# =============================================================================
# Water / Fat From Fat Fraction
# =============================================================================

def water_fat_from_ff(
    echoes: EchoSeries,
    ff: Union[FatFractionMap, np.ndarray],
    spectrum: FatSpectrum,
    subset: Union[EchoSubset, Sequence[int]],
) -> WaterFatImages:
    """
    Water and fat magnitudes from a fat-fraction map, averaged over echoes.

    W = mean_n |S_n (1-FF) / (1 + FF(a_n - 1))|
    F = mean_n |S_n FF     / (1 + FF(a_n - 1))|

    Voxels where any used denominator is smaller than 1e-9 in magnitude are
    set to 0 and flagged.
    """
    values = ff.values if isinstance(ff, FatFractionMap) else np.asarray(ff, dtype=np.float64)
    if values.shape != echoes.spatial_shape:
        raise ShapeError("water_fat_from_ff", "ff", f"{values.shape} != {echoes.spatial_shape}")
    if values.size and (values.min() < 0 or values.max() > 1):
        raise ValueError("fat fraction must lie in [0, 1]")

    indices = _as_indices(subset, echoes.n_echoes)
    a = fat_modulations(spectrum, echoes.acquisition, indices)
    signals = echoes.data[np.asarray(indices) - 1]

    expand = (slice(None),) + (None,) * values.ndim
    denominators = 1.0 + values[None] * (a[expand] - 1.0)
    small = np.abs(denominators) < DENOMINATOR_EPS
    flagged = small.any(axis=0)
    safe = np.where(small, 1.0, denominators)

    scaled = np.abs(signals / safe)
    water = (scaled * (1.0 - values)[None]).mean(axis=0)
    fat = (scaled * values[None]).mean(axis=0)
    water[flagged] = 0.0
    fat[flagged] = 0.0

    if flagged.any():
        logger.warning(f"water_fat_from_ff: {int(flagged.sum())} voxels with vanishing denominator")
    return WaterFatImages(water=water, fat=fat, flagged=flagged)


def clamp_ff(raw) -> FatFractionMap:
    """Clamp a raw fat-fraction map to [0, 1]."""
    values = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("fat fraction map")
    return FatFractionMap(np.clip(values, 0.0, 1.0))


# =============================================================================
# Network Input Preparation
# =============================================================================

def max_abs_component(echoes: EchoSeries) -> float:
    data = echoes.data
    if data.size == 0:
        return 0.0
    return float(max(np.abs(data.real).max(), np.abs(data.imag).max()))


def normalize_input(echoes: EchoSeries) -> EchoSeries:
    """
    Scale the whole scan so the largest real/imaginary magnitude is 1.

    The divisor is accumulated into `scale`. An all-zero scan is returned
    unchanged with a warning.
    """
    divisor = max_abs_component(echoes)
    if divisor == 0.0:
        logger.warning("normalize_input: all-zero scan, leaving data unscaled")
        return EchoSeries(echoes.data.copy(), echoes.acquisition, echoes.scale)

    data = np.empty_like(echoes.data)
    data.real = echoes.data.real / divisor
    data.imag = echoes.data.imag / divisor
    return EchoSeries(data, echoes.acquisition, echoes.scale * divisor)


def to_channels(
    echoes: EchoSeries,
    subset: Union[EchoSubset, Sequence[int]],
    dtype=None,
) -> Tensor:
    """
    Network input [2K, H, W]: (re_1, im_1, re_2, im_2, ...) in subset order.
    """
    if echoes.data.ndim != 3:
        raise ShapeError("to_channels", "rank", f"expected a single slice [N,H,W], got {echoes.data.shape}")
    indices = _as_indices(subset, echoes.n_echoes)
    _, h, w = echoes.data.shape
    channels = np.empty((2 * len(indices), h, w), dtype=np.float64)
    for k, n in enumerate(indices):
        channels[2 * k] = echoes.data[n - 1].real
        channels[2 * k + 1] = echoes.data[n - 1].imag
    return Tensor(channels, dtype=dtype)

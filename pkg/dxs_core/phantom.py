"""
Synthetic multi-slice abdominal phantoms.

Each subject is a stack of slices with an elliptical body, a subcutaneous
fat ring, muscle background, a liver ellipse and bone-marrow spots. Fat
fraction, signal level and R2* are piecewise constant per tissue; the field
map is a smooth low-order polynomial; the bipolar polarity error varies
linearly along the readout direction. Echoes are synthesized with the
multi-peak signal model and optionally corrupted with complex Gaussian
noise.

Generation is fully determined by (seed, config): geometry/tissue draws and
noise come from independent child streams of one SeedSequence.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dxs_compute.pool import WorkerPool
from dxs_core.dataset import (
    LIVER_CUTOFF,
    DatasetManifest,
    Subject,
    SubjectRecord,
    subject_id_for,
    write_manifest,
    write_subject,
)
from dxs_core.signal_model import (
    AcquisitionConfig,
    EchoSeries,
    FatSpectrum,
    reference_echo_subset,
    synthesize_series,
)
from dxs_graph.errors import ConfigError
from dxs_graph.utils.live_logger import report

logger = logging.getLogger(__name__)

# Total (water + fat) signal level per tissue, arbitrary units
TISSUE_SIGNAL: Dict[str, float] = {
    "subcutaneous_fat": 1.0,
    "muscle": 0.55,
    "liver": 0.75,
    "marrow": 0.85,
}

Range = Tuple[float, float]


class PhantomConfig(BaseModel):
    """Phantom geometry, tissue and noise parameters."""

    model_config = ConfigDict(extra="forbid")

    height: int = Field(64, ge=8)
    width: int = Field(64, ge=8)
    slices: int = Field(8, ge=1)
    air_slices: int = Field(1, ge=0, description="Trailing slices outside the body")

    fat_ff_range: Range = (0.85, 0.95)
    muscle_ff_range: Range = (0.02, 0.08)
    liver_ff_range: Range = (0.0, 0.30)
    marrow_ff_range: Range = (0.70, 0.95)
    fatty_fraction: float = Field(0.2, ge=0.0, le=1.0)

    field_mode: Literal["polynomial", "ramp", "constant"] = "polynomial"
    field_periods: float = Field(1.5, ge=0.0, description="Field span in ambiguity periods")
    r2s_range: Range = (20.0, 100.0)
    theta_max: float = Field(0.2, ge=0.0)
    snr: Optional[float] = Field(50.0, gt=0)

    acquisition: AcquisitionConfig = Field(default_factory=AcquisitionConfig)
    spectrum: FatSpectrum = Field(default_factory=FatSpectrum)

    @field_validator("fat_ff_range", "muscle_ff_range", "liver_ff_range", "marrow_ff_range")
    @classmethod
    def _check_ff_range(cls, value: Range) -> Range:
        lo, hi = value
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"fat-fraction range must satisfy 0 <= lo <= hi <= 1, got {value}")
        return value

    @field_validator("r2s_range")
    @classmethod
    def _check_r2s_range(cls, value: Range) -> Range:
        lo, hi = value
        if not (0.0 <= lo <= hi):
            raise ValueError(f"R2* range must satisfy 0 <= lo <= hi, got {value}")
        return value

    @model_validator(mode="after")
    def _check_geometry(self) -> "PhantomConfig":
        if self.air_slices >= self.slices:
            raise ValueError("air_slices must leave at least one body slice")
        return self

    @property
    def ambiguity_period(self) -> float:
        """Field period (rad/s) of the odd-echo reference fit."""
        indices = reference_echo_subset(self.acquisition.n_echoes).indices
        return 2.0 * math.pi / self.acquisition.effective_spacing(indices)


def _check_config(cfg: PhantomConfig) -> None:
    if cfg.height % 4 or cfg.width % 4:
        raise ConfigError(f"phantom.height/width must be multiples of 4, got {cfg.height}x{cfg.width}")


# =============================================================================
# Geometry
# =============================================================================

def _grid(cfg: PhantomConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized pixel-centre coordinates in [-1, 1]; x is the readout axis."""
    y = (np.arange(cfg.height) + 0.5) / cfg.height * 2.0 - 1.0
    x = (np.arange(cfg.width) + 0.5) / cfg.width * 2.0 - 1.0
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(yy, xx, cy, cx, ay, ax) -> np.ndarray:
    if ay <= 0 or ax <= 0:
        return np.zeros_like(yy, dtype=bool)
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _tissue_labels(cfg: PhantomConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-slice tissue labels [Z, H, W] (0 air, 1 fat, 2 muscle, 3 liver,
    4 marrow) and the body mask.
    """
    yy, xx = _grid(cfg)
    body_slices = cfg.slices - cfg.air_slices

    ax = rng.uniform(0.78, 0.90)
    ay = rng.uniform(0.55, 0.70)
    ring = rng.uniform(0.06, 0.10)
    liver_cx = rng.uniform(-0.38, -0.22)
    liver_cy = rng.uniform(-0.12, 0.02)
    liver_ax = rng.uniform(0.26, 0.34)
    liver_ay = rng.uniform(0.20, 0.28)
    liver_zc = 0.6 * (body_slices - 1)
    liver_zr = max(0.45 * body_slices, 0.5)
    rib_offset = rng.uniform(0.45, 0.55)

    labels = np.zeros((cfg.slices, cfg.height, cfg.width), dtype=np.int8)
    for z in range(body_slices):
        zn = (z - (body_slices - 1) / 2.0) / max(body_slices, 1)
        taper = 1.0 - 0.15 * abs(zn)
        bax, bay = ax * taper, ay * taper
        body = _ellipse(yy, xx, 0.0, 0.0, bay, bax)
        inner = _ellipse(yy, xx, 0.0, 0.0, bay - ring, bax - ring)

        sl = labels[z]
        sl[body] = 1
        sl[inner] = 2

        spine_cy = bay - ring - 0.12
        marrow = _ellipse(yy, xx, spine_cy, 0.0, 0.07, 0.07)
        marrow |= _ellipse(yy, xx, 0.25, rib_offset, 0.05, 0.05)
        marrow |= _ellipse(yy, xx, 0.25, -rib_offset, 0.05, 0.05)
        sl[marrow & inner] = 4

        dz = (z - liver_zc) / liver_zr
        if abs(dz) < 0.95:
            scale = math.sqrt(1.0 - dz * dz)
            liver = _ellipse(yy, xx, liver_cy, liver_cx, liver_ay * scale, liver_ax * scale)
            sl[liver & inner] = 3

    return labels, labels > 0


def _draw_liver_ff(cfg: PhantomConfig, rng: np.random.Generator, forced_fatty: bool) -> float:
    """Uniform over liver_ff_range; forced livers are confined to (cutoff, hi]."""
    lo, hi = cfg.liver_ff_range
    if forced_fatty and hi > LIVER_CUTOFF:
        lo = max(lo, float(np.nextafter(LIVER_CUTOFF, 1.0)))
    return float(rng.uniform(lo, hi))


def _field_map(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth field map [H, W] in rad/s spanning at most field_periods periods."""
    yy, xx = _grid(cfg)
    span = cfg.field_periods * cfg.ambiguity_period

    if cfg.field_mode == "constant":
        return np.full_like(yy, rng.uniform(-0.5, 0.5) * span)

    if cfg.field_mode == "ramp":
        return span * (xx + 1.0) / 2.0 - span / 2.0

    coeffs = rng.normal(size=5)
    surface = coeffs[0] * xx + coeffs[1] * yy + coeffs[2] * xx * yy + coeffs[3] * xx ** 2 + coeffs[4] * yy ** 2
    extent = surface.max() - surface.min()
    if extent > 0:
        surface = surface / extent * span * rng.uniform(0.5, 1.0)
    surface -= surface.mean()
    return surface + rng.uniform(-0.25, 0.25) * cfg.ambiguity_period


# =============================================================================
# Noise
# =============================================================================

def add_noise(
    echoes: EchoSeries,
    snr: Optional[float],
    seed: Union[int, np.random.SeedSequence],
    mask: Optional[np.ndarray] = None,
) -> EchoSeries:
    """
    Add i.i.d. complex Gaussian noise with sigma = mean foreground |S| / snr
    on each of the real and imaginary components.

    `snr=None` or infinite returns an unchanged copy. The foreground defaults
    to voxels with nonzero signal in any echo.
    """
    if snr is None or math.isinf(snr):
        return EchoSeries(echoes.data.copy(), echoes.acquisition, echoes.scale)
    if snr <= 0:
        raise ValueError(f"snr must be > 0, got {snr}")

    magnitude = np.abs(echoes.data)
    if mask is None:
        mask = magnitude.max(axis=0) > 0
    foreground = magnitude[:, mask]
    if foreground.size == 0:
        return EchoSeries(echoes.data.copy(), echoes.acquisition, echoes.scale)

    sigma = float(foreground.mean()) / snr
    rng = np.random.default_rng(seed)
    noise = rng.normal(scale=sigma, size=echoes.data.shape) + 1j * rng.normal(scale=sigma, size=echoes.data.shape)
    return EchoSeries(echoes.data + noise, echoes.acquisition, echoes.scale)


# =============================================================================
# Subjects
# =============================================================================

def generate_subject(
    seed: int,
    cfg: PhantomConfig,
    forced_fatty: Optional[bool] = None,
    subject_id: str = "subj-000",
) -> Subject:
    """
    Generate one subject deterministically from (seed, cfg).

    Args:
        seed: Subject seed
        cfg: Phantom configuration
        forced_fatty: Force the liver FF above the cutoff; False draws it over
            the whole liver range; None forces with probability cfg.fatty_fraction
        subject_id: Identifier stored with the subject

    Returns:
        Subject with echoes [N_echo, Z, H, W] and truth maps [Z, H, W]
    """
    _check_config(cfg)
    geometry_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(geometry_seq)

    labels, body_mask = _tissue_labels(cfg, rng)
    if forced_fatty is None:
        forced_fatty = bool(rng.random() < cfg.fatty_fraction)

    tissue_ff = {
        1: float(rng.uniform(*cfg.fat_ff_range)),
        2: float(rng.uniform(*cfg.muscle_ff_range)),
        3: _draw_liver_ff(cfg, rng, forced_fatty),
        4: float(rng.uniform(*cfg.marrow_ff_range)),
    }
    tissue_r2s = {label: float(rng.uniform(*cfg.r2s_range)) for label in (1, 2, 3, 4)}
    tissue_signal = {
        1: TISSUE_SIGNAL["subcutaneous_fat"],
        2: TISSUE_SIGNAL["muscle"],
        3: TISSUE_SIGNAL["liver"],
        4: TISSUE_SIGNAL["marrow"],
    }

    shape = labels.shape
    truth_ff = np.zeros(shape)
    signal = np.zeros(shape)
    truth_r2s = np.zeros(shape)
    for label in (1, 2, 3, 4):
        region = labels == label
        truth_ff[region] = tissue_ff[label]
        signal[region] = tissue_signal[label]
        truth_r2s[region] = tissue_r2s[label]
    truth_water = signal * (1.0 - truth_ff)
    truth_fat = signal * truth_ff

    field_2d = _field_map(cfg, rng)
    truth_field = np.broadcast_to(field_2d, shape).copy()

    _, xx = _grid(cfg)
    phase0 = rng.uniform(-math.pi, math.pi) + rng.uniform(-0.5, 0.5) * xx
    theta_im = rng.uniform(-0.5, 0.5) * cfg.theta_max + rng.uniform(-0.5, 0.5) * cfg.theta_max * xx
    theta = np.broadcast_to(1j * theta_im, shape)

    clean = synthesize_series(
        truth_water, truth_fat, cfg.spectrum, cfg.acquisition,
        phase0=np.broadcast_to(phase0, shape),
        field=truth_field,
        r2s=truth_r2s,
        theta=theta,
    )
    echoes = add_noise(clean, cfg.snr, noise_seq, mask=body_mask)

    liver_mask = labels == 3
    return Subject(
        subject_id=subject_id,
        seed=int(seed),
        echoes=echoes,
        truth_ff=truth_ff,
        truth_water=truth_water,
        truth_fat=truth_fat,
        truth_field=truth_field,
        truth_r2s=truth_r2s,
        body_mask=body_mask,
        liver_mask=liver_mask,
        liver_ff=tissue_ff[3],
        forced_fatty=forced_fatty,
    )


def subject_seed(master_seed: int, index: int) -> int:
    """Independent per-subject seed from the (master_seed, index) counter."""
    sequence = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def is_forced_fatty_index(index: int) -> bool:
    """Every fifth subject (index 0, 5, 10, ...) is forced above the cutoff."""
    return index % 5 == 0


def generate_dataset(
    n_subjects: int,
    master_seed: int,
    cfg: PhantomConfig,
    out_dir: Union[str, Path],
    workers: Optional[int] = None,
) -> DatasetManifest:
    """
    Generate and persist a cohort.

    Args:
        n_subjects: Number of subjects (>= 1)
        master_seed: Seed from which all subject seeds are derived
        cfg: Phantom configuration
        out_dir: Dataset root
        workers: Worker cap (defaults to DXS_THREADS)

    Returns:
        The written manifest
    """
    if n_subjects < 1:
        raise ConfigError(f"n_subjects must be >= 1, got {n_subjects}")
    _check_config(cfg)
    out_dir = Path(out_dir)

    def build(index: int) -> SubjectRecord:
        subject_id = subject_id_for(index)
        seed = subject_seed(master_seed, index)
        subject = generate_subject(seed, cfg, forced_fatty=is_forced_fatty_index(index), subject_id=subject_id)
        write_subject(out_dir, subject)
        report(f"Generated {subject_id} (liver FF {subject.liver_ff:.4f})")
        return SubjectRecord(
            subject_id=subject_id,
            seed=seed,
            liver_ff=subject.liver_ff,
            forced_fatty=subject.forced_fatty,
        )

    records = WorkerPool(workers).map(build, range(n_subjects))
    manifest = DatasetManifest(
        master_seed=master_seed,
        config=cfg.model_dump(mode="json"),
        subjects=records,
    )
    write_manifest(out_dir, manifest)
    logger.info(f"Dataset written: {n_subjects} subjects in {out_dir}")
    return manifest


def regenerate_subject(manifest: DatasetManifest, subject_id: str) -> Subject:
    """Rebuild a subject from its manifest seed and stored configuration."""
    record = manifest.record(subject_id)
    cfg = PhantomConfig.model_validate(manifest.config)
    return generate_subject(record.seed, cfg, forced_fatty=record.forced_fatty, subject_id=subject_id)

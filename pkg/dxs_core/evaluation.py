"""
Foreground masking, liver fat quantification and cohort metrics.

Foreground is defined slicewise with Otsu's threshold on the sum of the
water and fat images. Liver FF is the median over the liver mask of all
slices; a liver is fatty when its FF is strictly above the cutoff.
"""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dxs_compute.pool import WorkerPool
from dxs_core.dataset import LIVER_CUTOFF, load_predictions, load_reference, load_subject, read_manifest
from dxs_core.export import difference_to_gray, ff_to_gray, magnitude_to_gray, write_png
from dxs_core.signal_model import EchoSubset, FatSpectrum, water_fat_from_ff
from dxs_core.tensorfile import atomic_write_json, atomic_write_text
from dxs_graph.errors import ConfigError, EmptyHistogramError, EmptyMaskError, SubjectMismatchError

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 256


class EvaluationConfig(BaseModel):
    """Evaluation parameters."""

    model_config = ConfigDict(extra="forbid")

    cutoff: float = Field(LIVER_CUTOFF, gt=0.0, lt=1.0)
    histogram_bins: int = Field(HISTOGRAM_BINS, ge=2)
    difference_range: float = Field(0.10, gt=0.0, description="Signed FF range of difference images")
    export_png: bool = True


# =============================================================================
# Otsu Threshold
# =============================================================================

def otsu_threshold(histogram: Sequence[int]) -> int:
    """
    Bin t maximizing the between-class variance of {<= t} vs {> t}.

    The criterion n0*n1*(mu0 - mu1)^2 = (s0*n1 - s1*n0)^2 / (n0*n1) is
    compared exactly in integer arithmetic; ties go to the lowest bin. A
    histogram with a single occupied bin returns that bin.

    Raises:
        EmptyHistogramError: no counts at all
    """
    counts = [int(c) for c in np.asarray(histogram).ravel()]
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    total = sum(counts)
    if total == 0:
        raise EmptyHistogramError("Otsu threshold on an empty histogram")

    occupied = [i for i, c in enumerate(counts) if c > 0]
    first, last = occupied[0], occupied[-1]
    if first == last:
        return first

    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t = first
    best_num, best_den = -1, 1
    n0 = 0
    s0 = 0
    for t in range(first, last):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        s1 = total_sum - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


@dataclass
class ForegroundMask:
    """Binary foreground plane plus the threshold that produced it."""
    mask: np.ndarray
    threshold_bin: Optional[int] = None
    threshold_value: Optional[float] = None

    @property
    def fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def foreground_mask(wf_sum: np.ndarray, bins: int = HISTOGRAM_BINS) -> ForegroundMask:
    """
    Otsu foreground of one W+F slice.

    Values are binned linearly over [0, max] (bin = floor(v / max * bins),
    capped at bins-1); voxels in bins strictly above the threshold are
    foreground. An all-zero slice yields an empty mask.
    """
    values = np.clip(np.asarray(wf_sum, dtype=np.float64), 0.0, None)
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        return ForegroundMask(mask=np.zeros(values.shape, dtype=bool))

    binned = np.minimum(np.floor(values / peak * bins).astype(np.int64), bins - 1)
    histogram = np.bincount(binned.ravel(), minlength=bins)
    t = otsu_threshold(histogram)
    return ForegroundMask(mask=binned > t, threshold_bin=t, threshold_value=(t + 1) * peak / bins)


def subject_foreground(water: np.ndarray, fat: np.ndarray, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """Slicewise Otsu foreground of a [Z, H, W] subject."""
    total = np.asarray(water) + np.asarray(fat)
    if total.ndim == 2:
        return foreground_mask(total, bins).mask
    return np.stack([foreground_mask(total[z], bins).mask for z in range(total.shape[0])])


# =============================================================================
# Liver Metrics
# =============================================================================

class LiverClass(str, Enum):
    NORMAL = "normal"
    FATTY = "fatty"


def liver_ff(ff: np.ndarray, liver_mask: np.ndarray) -> float:
    """Median FF over all liver voxels of all slices."""
    mask = np.asarray(liver_mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("liver_ff: liver mask is empty")
    return float(np.median(np.asarray(ff, dtype=np.float64)[mask]))


def classify_liver(ff: float, cutoff: float = LIVER_CUTOFF) -> LiverClass:
    """Fatty iff ff > cutoff; exactly at the cutoff is normal."""
    return LiverClass.FATTY if ff > cutoff else LiverClass.NORMAL


@dataclass
class LiverEntry:
    subject_id: str
    reference_ff: float
    predicted_ff: float
    abs_error: float
    signed_error: float
    reference_class: str
    predicted_class: str


@dataclass
class LiverReport:
    """Cohort liver-FF agreement and cutoff classification."""
    entries: List[LiverEntry]
    mae: float
    bias: float
    normal_as_fatty: int
    fatty_as_normal: int
    cutoff: float = LIVER_CUTOFF
    label: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_normal(self) -> int:
        return sum(e.reference_class == LiverClass.NORMAL.value for e in self.entries)

    @property
    def n_fatty(self) -> int:
        return sum(e.reference_class == LiverClass.FATTY.value for e in self.entries)

    @property
    def misclassified(self) -> int:
        return self.normal_as_fatty + self.fatty_as_normal

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "cutoff": self.cutoff,
            "mae": self.mae,
            "bias": self.bias,
            "normal_as_fatty": self.normal_as_fatty,
            "fatty_as_normal": self.fatty_as_normal,
            "n_normal": self.n_normal,
            "n_fatty": self.n_fatty,
            "entries": [asdict(e) for e in self.entries],
            **self.extra,
        }

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["subject_id", "reference_ff", "predicted_ff", "abs_error", "signed_error",
                         "reference_class", "predicted_class"])
        for e in self.entries:
            writer.writerow([e.subject_id, repr(e.reference_ff), repr(e.predicted_ff), repr(e.abs_error),
                             repr(e.signed_error), e.reference_class, e.predicted_class])
        return buffer.getvalue()

    def write(self, out_dir: Union[str, Path]) -> None:
        out_dir = Path(out_dir)
        atomic_write_json(out_dir / "liver_report.json", self.to_dict())
        atomic_write_text(out_dir / "liver_report.csv", self.to_csv())
        atomic_write_text(out_dir / "scatter.csv", scatter_csv(self))


def liver_report(
    predictions: Mapping[str, float],
    references: Mapping[str, float],
    cutoff: float = LIVER_CUTOFF,
    label: str = "",
) -> LiverReport:
    """
    Per-subject liver FF errors, MAE, bias (mean prediction - reference)
    and both misclassification counts at `cutoff`.

    Raises:
        SubjectMismatchError: the two mappings cover different subjects
    """
    pred_ids = set(predictions)
    ref_ids = set(references)
    if pred_ids != ref_ids:
        raise SubjectMismatchError(ref_ids - pred_ids, pred_ids - ref_ids)
    if not pred_ids:
        raise SubjectMismatchError([], [])

    entries = []
    for subject_id in sorted(pred_ids):
        ref = float(references[subject_id])
        pred = float(predictions[subject_id])
        entries.append(LiverEntry(
            subject_id=subject_id,
            reference_ff=ref,
            predicted_ff=pred,
            abs_error=abs(pred - ref),
            signed_error=pred - ref,
            reference_class=classify_liver(ref, cutoff).value,
            predicted_class=classify_liver(pred, cutoff).value,
        ))

    normal_as_fatty = sum(
        e.reference_class == LiverClass.NORMAL.value and e.predicted_class == LiverClass.FATTY.value
        for e in entries
    )
    fatty_as_normal = sum(
        e.reference_class == LiverClass.FATTY.value and e.predicted_class == LiverClass.NORMAL.value
        for e in entries
    )
    return LiverReport(
        entries=entries,
        mae=float(np.mean([e.abs_error for e in entries])),
        bias=float(np.mean([e.signed_error for e in entries])),
        normal_as_fatty=normal_as_fatty,
        fatty_as_normal=fatty_as_normal,
        cutoff=cutoff,
        label=label,
    )


def scatter_csv(report: LiverReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["subject_id", "reference_ff", "predicted_ff"])
    for e in report.entries:
        writer.writerow([e.subject_id, repr(e.reference_ff), repr(e.predicted_ff)])
    return buffer.getvalue()


def export_profile(ff_pred: np.ndarray, ff_ref: np.ndarray, row: int, path: Union[str, Path]) -> None:
    """Write the FF line profile (column, predicted, reference) through `row`."""
    ff_pred = np.asarray(ff_pred)
    ff_ref = np.asarray(ff_ref)
    if ff_pred.shape != ff_ref.shape or ff_pred.ndim != 2:
        raise ValueError(f"profile needs two equal 2-D maps, got {ff_pred.shape} and {ff_ref.shape}")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["column", "predicted", "reference"])
    for col in range(ff_pred.shape[1]):
        writer.writerow([col, repr(float(ff_pred[row, col])), repr(float(ff_ref[row, col]))])
    atomic_write_text(path, buffer.getvalue())


# =============================================================================
# Cohort Evaluation
# =============================================================================

@dataclass
class SubjectEvaluation:
    subject_id: str
    predicted_ff: float
    reference_ff: float
    voxel_mae: float
    slices: List[int]


def _liver_profile_row(liver_mask: np.ndarray, slices: Sequence[int]) -> Optional[Tuple[int, int]]:
    """(slice, row) through the liver centre on the slice with the most liver voxels."""
    counts = [(int(liver_mask[z].sum()), z) for z in slices]
    if not counts or max(counts)[0] == 0:
        return None
    _, z = max(counts, key=lambda c: (c[0], -c[1]))
    rows = np.nonzero(liver_mask[z])[0]
    return z, int(np.median(rows))


def _export_slices(out_dir: Path, subject_id: str, subject, pred_ff: np.ndarray, ref_ff: np.ndarray,
                   wf_sum: np.ndarray, foreground: np.ndarray, slices: Sequence[int],
                   cfg: EvaluationConfig, subset: EchoSubset, spectrum: FatSpectrum) -> None:
    png_dir = out_dir / "png" / subject_id
    for z in slices:
        mask = foreground[z]
        write_png(png_dir / f"ff_pred_z{z:02d}.png", ff_to_gray(pred_ff[z], mask))
        write_png(png_dir / f"ff_ref_z{z:02d}.png", ff_to_gray(ref_ff[z], mask))
        write_png(png_dir / f"diff_z{z:02d}.png",
                  difference_to_gray(pred_ff[z] - ref_ff[z], cfg.difference_range, mask))
        images = water_fat_from_ff(subject.echoes.slice(z), np.clip(pred_ff[z], 0.0, 1.0), spectrum, subset)
        peak = float(wf_sum[z].max())
        write_png(png_dir / f"water_z{z:02d}.png", magnitude_to_gray(images.water, peak, mask))
        write_png(png_dir / f"fat_z{z:02d}.png", magnitude_to_gray(images.fat, peak, mask))


def evaluate_predictions(
    predictions_dir: Union[str, Path],
    dataset_dir: Union[str, Path],
    out_dir: Union[str, Path],
    cfg: Optional[EvaluationConfig] = None,
    reference_dir: Optional[Union[str, Path]] = None,
    against: str = "truth",
    echoes: str = "all:5",
    spectrum: Optional[FatSpectrum] = None,
    label: str = "",
    workers: Optional[int] = None,
) -> LiverReport:
    """
    Evaluate pooled validation predictions of a training run.

    Liver FF is the median over the liver voxels of the predicted slices,
    compared with the phantom truth (against="truth") or the reference
    separation (against="reference").

    Args:
        predictions_dir: Training output root holding predictions/
        dataset_dir: Dataset root
        out_dir: Report and image output directory
        cfg: Evaluation parameters
        reference_dir: Reference separations (needed for against="reference")
        against: Comparison target
        echoes: Echo subset used for the water/fat image export
        spectrum: Fat spectrum for the water/fat image export
        label: Report label (e.g. the echo configuration)
        workers: Worker cap for per-subject evaluation

    Returns:
        LiverReport, also written to out_dir

    Raises:
        SubjectMismatchError: predictions for subjects absent from the dataset
    """
    cfg = cfg or EvaluationConfig()
    spectrum = spectrum or FatSpectrum.default()
    out_dir = Path(out_dir)
    if against not in ("truth", "reference"):
        raise ValueError(f"against must be 'truth' or 'reference', got {against!r}")
    if against == "reference" and reference_dir is None:
        raise ConfigError("Evaluation against the reference needs a reference directory")

    predictions = load_predictions(predictions_dir)
    manifest = read_manifest(dataset_dir)
    unknown = set(predictions) - set(manifest.subject_ids)
    if unknown or not predictions:
        raise SubjectMismatchError([], sorted(unknown))

    def evaluate(subject_id: str) -> SubjectEvaluation:
        subject = load_subject(dataset_dir, subject_id)
        pred_ff, slices = predictions[subject_id]
        if pred_ff.shape != subject.truth_ff.shape:
            raise SubjectMismatchError([subject_id], [subject_id])
        if against == "truth":
            ref_ff = subject.truth_ff
            wf_sum = subject.truth_water + subject.truth_fat
        else:
            reference = load_reference(reference_dir, subject_id)
            ref_ff, wf_sum = reference.ff, reference.wf_sum

        foreground = np.stack([foreground_mask(plane, cfg.histogram_bins).mask for plane in wf_sum])
        selected = np.zeros(subject.truth_ff.shape[0], dtype=bool)
        selected[slices] = True
        liver = subject.liver_mask & selected[:, None, None]
        voxels = foreground & selected[:, None, None]
        voxel_mae = float(np.abs(pred_ff[voxels] - ref_ff[voxels]).mean()) if voxels.any() else float("nan")

        if cfg.export_png:
            subset = EchoSubset.parse(echoes).validate(subject.echoes.n_echoes)
            _export_slices(out_dir, subject_id, subject, pred_ff, ref_ff, wf_sum, foreground, slices,
                           cfg, subset, spectrum)
        profile = _liver_profile_row(subject.liver_mask, slices)
        if profile is not None:
            z, row = profile
            export_profile(pred_ff[z], ref_ff[z], row, out_dir / "profiles" / f"{subject_id}.csv")

        return SubjectEvaluation(
            subject_id=subject_id,
            predicted_ff=liver_ff(pred_ff, liver),
            reference_ff=liver_ff(ref_ff, liver),
            voxel_mae=voxel_mae,
            slices=list(slices),
        )

    results = WorkerPool(workers).map(evaluate, sorted(predictions))
    report = liver_report(
        {r.subject_id: r.predicted_ff for r in results},
        {r.subject_id: r.reference_ff for r in results},
        cutoff=cfg.cutoff,
        label=label,
    )
    voxel_errors = [r.voxel_mae for r in results if math.isfinite(r.voxel_mae)]
    report.extra = {
        "against": against,
        "voxel_mae": float(np.mean(voxel_errors)) if voxel_errors else float("nan"),
    }
    report.write(out_dir)
    logger.info(
        f"Evaluated {len(results)} subjects: liver MAE {report.mae:.4f}, bias {report.bias:+.4f}, "
        f"misclassified {report.misclassified}"
    )
    return report

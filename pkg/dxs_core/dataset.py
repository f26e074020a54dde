"""
On-disk dataset layout.

    <root>/manifest.json
    <root>/<subject_id>/echoes_real.dxt   [N_echo, Z, H, W] float32
    <root>/<subject_id>/echoes_imag.dxt
    <root>/<subject_id>/truth_{ff,water,fat,field,r2s}.dxt   [Z, H, W]
    <root>/<subject_id>/{body,liver}_mask.dxt                [Z, H, W] 0/1
    <root>/<subject_id>/meta.json

Reference separations live in a parallel tree:

    <ref>/<subject_id>/{ff,water,fat,field,residual,flags}.dxt
    <ref>/<subject_id>/meta.json
    <ref>/summary.json

Arrays are rounded to float32 on write and widened to float64 on load.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from dxs_core.signal_model import AcquisitionConfig, EchoSeries
from dxs_core.tensorfile import atomic_write_json, read_json, read_tensor, write_tensor
from dxs_graph.errors import DatasetError, TensorFileError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
REFERENCE_METHOD = "reference-surrogate"

# Clinical normal/fatty liver cutoff; fatty iff FF is strictly above it
LIVER_CUTOFF = 0.0556

PathLike = Union[str, Path]


def subject_id_for(index: int) -> str:
    return f"subj-{index:03d}"


# =============================================================================
# Subject
# =============================================================================

@dataclass
class Subject:
    """One synthetic subject with its ground truth."""
    subject_id: str
    seed: int
    echoes: EchoSeries
    truth_ff: np.ndarray
    truth_water: np.ndarray
    truth_fat: np.ndarray
    truth_field: np.ndarray
    truth_r2s: np.ndarray
    body_mask: np.ndarray
    liver_mask: np.ndarray
    liver_ff: float
    forced_fatty: bool

    @property
    def fatty(self) -> bool:
        return self.liver_ff > LIVER_CUTOFF

    @property
    def n_slices(self) -> int:
        return self.truth_ff.shape[0]

    def liver_slices(self) -> List[int]:
        return [z for z in range(self.n_slices) if self.liver_mask[z].any()]


_SUBJECT_ARRAYS = ("truth_ff", "truth_water", "truth_fat", "truth_field", "truth_r2s")
_SUBJECT_MASKS = ("body_mask", "liver_mask")


def write_subject(root: PathLike, subject: Subject) -> Path:
    """Write one subject directory below `root`."""
    directory = Path(root) / subject.subject_id
    data = subject.echoes.data
    write_tensor(directory / "echoes_real.dxt", data.real.astype(np.float32))
    write_tensor(directory / "echoes_imag.dxt", data.imag.astype(np.float32))
    for name in _SUBJECT_ARRAYS:
        write_tensor(directory / f"{name}.dxt", getattr(subject, name).astype(np.float32))
    for name in _SUBJECT_MASKS:
        write_tensor(directory / f"{name}.dxt", getattr(subject, name).astype(np.float32))
    atomic_write_json(directory / "meta.json", {
        "subject_id": subject.subject_id,
        "seed": int(subject.seed),
        "liver_ff": float(subject.liver_ff),
        "forced_fatty": bool(subject.forced_fatty),
        "shape": list(subject.truth_ff.shape),
        "acquisition": subject.echoes.acquisition.model_dump(),
    })
    return directory


def load_subject(root: PathLike, subject_id: str) -> Subject:
    """Load a subject directory written by write_subject."""
    directory = Path(root) / subject_id
    if not directory.is_dir():
        raise DatasetError(f"Subject directory not found: {directory}")
    try:
        meta = read_json(directory / "meta.json")
        real = read_tensor(directory / "echoes_real.dxt").astype(np.float64)
        imag = read_tensor(directory / "echoes_imag.dxt").astype(np.float64)
        arrays = {name: read_tensor(directory / f"{name}.dxt").astype(np.float64) for name in _SUBJECT_ARRAYS}
        masks = {name: read_tensor(directory / f"{name}.dxt") > 0.5 for name in _SUBJECT_MASKS}
    except TensorFileError as e:
        raise DatasetError(f"Subject '{subject_id}' is incomplete: {e}") from e

    acquisition = AcquisitionConfig(**meta["acquisition"])
    echoes = EchoSeries(real + 1j * imag, acquisition)
    return Subject(
        subject_id=meta["subject_id"],
        seed=int(meta["seed"]),
        echoes=echoes,
        liver_ff=float(meta["liver_ff"]),
        forced_fatty=bool(meta["forced_fatty"]),
        **arrays,
        **masks,
    )


# =============================================================================
# Manifest
# =============================================================================

@dataclass
class SubjectRecord:
    subject_id: str
    seed: int
    liver_ff: float
    forced_fatty: bool

    @property
    def fatty(self) -> bool:
        return self.liver_ff > LIVER_CUTOFF


@dataclass
class DatasetManifest:
    """Index of a generated dataset."""
    master_seed: int
    config: Dict[str, Any]
    subjects: List[SubjectRecord] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    @property
    def subject_ids(self) -> List[str]:
        return [record.subject_id for record in self.subjects]

    def record(self, subject_id: str) -> SubjectRecord:
        for record in self.subjects:
            if record.subject_id == subject_id:
                return record
        raise DatasetError(f"Subject '{subject_id}' not in manifest")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "master_seed": self.master_seed,
            "config": self.config,
            "subjects": [asdict(record) for record in self.subjects],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "DatasetManifest":
        try:
            return cls(
                version=int(payload.get("version", MANIFEST_VERSION)),
                master_seed=int(payload["master_seed"]),
                config=dict(payload.get("config", {})),
                subjects=[SubjectRecord(**record) for record in payload["subjects"]],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"Malformed manifest: {e}") from e


def write_manifest(root: PathLike, manifest: DatasetManifest) -> Path:
    path = Path(root) / MANIFEST_NAME
    atomic_write_json(path, manifest.to_dict())
    return path


def read_manifest(root: PathLike) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"No dataset manifest at {path}")
    return DatasetManifest.from_dict(read_json(path))


# =============================================================================
# Reference Maps
# =============================================================================

@dataclass
class ReferenceMaps:
    """Stored reference separation of one subject, [Z, H, W] each."""
    subject_id: str
    ff: np.ndarray
    water: np.ndarray
    fat: np.ndarray
    field: Optional[np.ndarray] = None
    method: str = REFERENCE_METHOD

    @property
    def wf_sum(self) -> np.ndarray:
        return self.water + self.fat


_REFERENCE_ARRAYS = ("ff", "water", "fat", "field", "residual", "flags")


def write_reference(root: PathLike, subject_id: str, arrays: Dict[str, np.ndarray],
                    meta: Dict[str, Any]) -> Path:
    """Write a subject's reference maps (keys from ff/water/fat/field/residual/flags)."""
    directory = Path(root) / subject_id
    for name in _REFERENCE_ARRAYS:
        if name in arrays:
            write_tensor(directory / f"{name}.dxt", np.asarray(arrays[name]).astype(np.float32))
    atomic_write_json(directory / "meta.json", {"subject_id": subject_id, "method": REFERENCE_METHOD, **meta})
    return directory


def load_reference(root: PathLike, subject_id: str) -> ReferenceMaps:
    directory = Path(root) / subject_id
    try:
        ff = read_tensor(directory / "ff.dxt").astype(np.float64)
        water = read_tensor(directory / "water.dxt").astype(np.float64)
        fat = read_tensor(directory / "fat.dxt").astype(np.float64)
        field_path = directory / "field.dxt"
        field_map = read_tensor(field_path).astype(np.float64) if field_path.exists() else None
    except TensorFileError as e:
        raise DatasetError(f"Reference for '{subject_id}' is incomplete: {e}") from e
    return ReferenceMaps(subject_id=subject_id, ff=ff, water=water, fat=fat, field=field_map)


# =============================================================================
# Validation Predictions
# =============================================================================

def write_predictions(out_dir: PathLike, subject_id: str, shape: Tuple[int, int, int],
                      slices: Dict[int, np.ndarray], fold_index: int) -> Path:
    """Write one subject's validation predictions; excluded slices stay zero."""
    directory = Path(out_dir) / "predictions" / subject_id
    volume = np.zeros(shape, dtype=np.float64)
    for z, plane in slices.items():
        volume[z] = plane
    write_tensor(directory / "ff.dxt", volume.astype(np.float32))
    atomic_write_json(directory / "slices.json", {"slices": sorted(slices), "fold": fold_index})
    return directory


def load_predictions(out_dir: PathLike) -> Dict[str, Tuple[np.ndarray, List[int]]]:
    """Pooled predictions: subject id -> (FF volume, predicted slice indices)."""
    root = Path(out_dir) / "predictions"
    if not root.is_dir():
        raise DatasetError(f"No predictions found below {out_dir}")
    predictions = {}
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            ff = read_tensor(directory / "ff.dxt").astype(np.float64)
        except TensorFileError as e:
            raise DatasetError(f"Predictions for '{directory.name}' are incomplete: {e}") from e
        slices = read_json(directory / "slices.json")["slices"]
        predictions[directory.name] = (ff, [int(z) for z in slices])
    return predictions

"""
Subject-level k-fold cross-validation and slice-serial training.

Gradient steps use a batch of one slice and run strictly in order; each
epoch visits the training slices in a shuffled order drawn from
(seed, epoch). The learning rate of epoch e is lr0 * decay**e. After every
epoch the loss per foreground voxel is sampled on every 2nd validation
slice and every 8th training slice with frozen parameters.

Fold outputs:

    <out>/fold-<i>/loss_curve.csv     epoch,train_loss,val_loss
    <out>/fold-<i>/checkpoint/        FileCheckpointer layout
    <out>/fold-<i>/fold.json          subjects, excluded slices, timings
    <out>/predictions/<subject>/ff.dxt, slices.json
    <out>/crossval.json
"""

import csv
import io
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dxs_compute.pool import WorkerPool
from dxs_core.autodiff import AdamState, Tape, Tensor, adam_step, masked_mse
from dxs_core.dataset import load_reference, load_subject, read_manifest, write_predictions
from dxs_core.evaluation import HISTOGRAM_BINS, foreground_mask
from dxs_core.signal_model import EchoSeries, EchoSubset, normalize_input, to_channels
from dxs_core.tensorfile import atomic_write_json, atomic_write_text
from dxs_core.unet import CropRecord, UNetParameters, UNetSpec, build_unet, forward, pad_input
from dxs_graph.errors import ConfigError, FoldError, NonFiniteGradientError, TrainingDivergedError
from dxs_graph.utils.live_logger import report, report_epoch

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class TrainConfig(BaseModel):
    """Optimizer schedule and cross-validation settings."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(16, ge=1)
    lr0: float = Field(0.001, gt=0.0)
    decay: float = Field(0.8727, gt=0.0, le=1.0, description="Learning-rate factor per epoch")
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    echoes: str = Field("all:5", description="Echo subset 'family:count'")
    seed: int = Field(0, ge=0)
    k_folds: int = Field(5, ge=2)
    fold: Optional[int] = Field(None, ge=0, description="Train only this fold (quick mode)")
    target: Literal["reference", "truth"] = "reference"
    empty_slice_fraction: float = Field(0.005, ge=0.0, lt=1.0)
    val_stride: int = Field(2, ge=1)
    train_stride: int = Field(8, ge=1)

    def echo_subset(self, n_echoes: int) -> EchoSubset:
        return EchoSubset.parse(self.echoes).validate(n_echoes)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used for the steps of `epoch` (counted from 0)."""
    return cfg.lr0 * cfg.decay ** epoch


def epoch_order(n_slices: int, seed: int, epoch: int) -> np.ndarray:
    """Training-slice visiting order for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n_slices)


# =============================================================================
# Fold Planning
# =============================================================================

@dataclass(frozen=True, order=True)
class SliceRef:
    subject_id: str
    z: int

    def __str__(self) -> str:
        return f"{self.subject_id}[{self.z}]"


@dataclass
class FoldPlan:
    """Subjects of one fold; slice lists are filled from the data."""
    fold_index: int
    k: int
    train_subjects: List[str]
    val_subjects: List[str]
    train_slices: List[SliceRef] = field(default_factory=list)
    val_slices: List[SliceRef] = field(default_factory=list)

    def audit(self) -> None:
        """Raise FoldError if a validation subject would receive a gradient step."""
        overlap = set(self.train_subjects) & set(self.val_subjects)
        leaked = {ref.subject_id for ref in self.train_slices} - set(self.train_subjects)
        if overlap or leaked:
            raise FoldError(
                f"Fold {self.fold_index}: validation subjects in training set: {sorted(overlap | leaked)}"
            )


def kfold_split(subject_ids: Sequence[str], k: int, seed: int) -> List[FoldPlan]:
    """
    Seeded shuffle of the subjects, cut into k contiguous near-equal folds.

    Fold i validates on the i-th part and trains on the rest.

    Raises:
        FoldError: k < 2 or more folds than subjects
    """
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise FoldError("Duplicate subject ids")
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise FoldError(f"k={k} exceeds the number of subjects ({len(ids)})")

    permutation = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(permutation, k)
    plans = []
    for i, part in enumerate(parts):
        val = sorted(ids[j] for j in part)
        val_set = set(val)
        plans.append(FoldPlan(
            fold_index=i,
            k=k,
            train_subjects=[s for s in ids if s not in val_set],
            val_subjects=val,
        ))
    return plans


def exclude_empty_slices(masks: np.ndarray, min_fraction: float = 0.005) -> List[int]:
    """
    Indices of slices whose foreground fraction is not below `min_fraction`.

    Slices without any foreground are always dropped, so min_fraction=0 keeps
    every slice that contributes to the masked loss.
    """
    masks = np.asarray(masks, dtype=bool)
    kept = []
    for z in range(masks.shape[0]):
        fraction = float(masks[z].sum()) / masks[z].size
        if fraction > 0.0 and not fraction < min_fraction:
            kept.append(z)
    return kept


# =============================================================================
# Training Data
# =============================================================================

@dataclass
class SubjectArrays:
    """Raw inputs for one subject: echoes [N,Z,H,W], target FF and W+F [Z,H,W]."""
    echoes: EchoSeries
    target_ff: np.ndarray
    wf_sum: np.ndarray


@dataclass
class SliceSample:
    """Padded network input, target and loss mask of one slice."""
    ref: SliceRef
    channels: Tensor
    target: Tensor
    mask: Tensor
    crop: CropRecord


@dataclass
class _PreparedSubject:
    samples: Dict[int, SliceSample]
    kept: List[int]
    excluded: List[int]
    shape: Tuple[int, int, int]


class TrainingData:
    """
    Lazily prepared per-subject training samples.

    Each scan is normalized as a whole, then split into per-slice channel
    tensors. The loss mask is the slicewise Otsu foreground of the target's
    W+F image; slices with too little foreground are excluded.
    """

    def __init__(
        self,
        loader: Callable[[str], SubjectArrays],
        subject_ids: Sequence[str],
        subset: EchoSubset,
        depth: int,
        min_fraction: float = 0.005,
        bins: int = HISTOGRAM_BINS,
        dtype=np.float32,
    ):
        self._loader = loader
        self.subject_ids = list(subject_ids)
        self.subset = subset
        self.depth = depth
        self.min_fraction = min_fraction
        self.bins = bins
        self.dtype = np.dtype(dtype)
        self._cache: Dict[str, _PreparedSubject] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_subjects(
        cls,
        subjects: Mapping[str, SubjectArrays],
        subset: EchoSubset,
        depth: int,
        **kwargs,
    ) -> "TrainingData":
        return cls(subjects.__getitem__, sorted(subjects), subset, depth, **kwargs)

    @classmethod
    def from_directory(
        cls,
        dataset_dir: PathLike,
        subset_text: str,
        depth: int,
        reference_dir: Optional[PathLike] = None,
        target: str = "reference",
        **kwargs,
    ) -> "TrainingData":
        """
        Training data backed by a dataset on disk.

        Args:
            dataset_dir: Dataset root with manifest.json
            subset_text: Echo subset 'family:count'
            depth: U-Net depth (input padding multiple)
            reference_dir: Reference separations; required for target="reference"
            target: "reference" (reference-surrogate maps) or "truth" (phantom truth)
        """
        manifest = read_manifest(dataset_dir)
        n_echoes = int(manifest.config.get("acquisition", {}).get("n_echoes", 5))
        subset = EchoSubset.parse(subset_text).validate(n_echoes)
        if target == "reference" and reference_dir is None:
            raise ConfigError("target='reference' needs a reference directory")

        def load(subject_id: str) -> SubjectArrays:
            subject = load_subject(dataset_dir, subject_id)
            if target == "truth":
                return SubjectArrays(subject.echoes, subject.truth_ff, subject.truth_water + subject.truth_fat)
            ref = load_reference(reference_dir, subject_id)
            return SubjectArrays(subject.echoes, ref.ff, ref.wf_sum)

        return cls(load, manifest.subject_ids, subset, depth, **kwargs)

    def _prepare(self, subject_id: str) -> _PreparedSubject:
        arrays = self._loader(subject_id)
        self.subset.validate(arrays.echoes.n_echoes)
        echoes = normalize_input(arrays.echoes)
        foreground = np.stack([foreground_mask(plane, self.bins).mask for plane in arrays.wf_sum])
        kept = exclude_empty_slices(foreground, self.min_fraction)
        excluded = [z for z in range(foreground.shape[0]) if z not in kept]

        samples = {}
        for z in kept:
            channels, crop = pad_input(to_channels(echoes.slice(z), self.subset, dtype=self.dtype), self.depth)
            target, _ = pad_input(arrays.target_ff[z][None].astype(self.dtype), self.depth)
            mask, _ = pad_input(foreground[z][None].astype(self.dtype), self.depth)
            samples[z] = SliceSample(SliceRef(subject_id, z), channels, target, mask, crop)
        if excluded:
            logger.debug(f"{subject_id}: excluded slices {excluded}")
        return _PreparedSubject(samples, kept, excluded, tuple(foreground.shape))

    def _subject(self, subject_id: str) -> _PreparedSubject:
        with self._lock:
            prepared = self._cache.get(subject_id)
            if prepared is None:
                prepared = self._prepare(subject_id)
                self._cache[subject_id] = prepared
            return prepared

    def slices(self, subject_id: str) -> List[SliceRef]:
        return [SliceRef(subject_id, z) for z in self._subject(subject_id).kept]

    def excluded(self, subject_id: str) -> List[int]:
        return list(self._subject(subject_id).excluded)

    def volume_shape(self, subject_id: str) -> Tuple[int, int, int]:
        return self._subject(subject_id).shape

    def sample(self, ref: SliceRef) -> SliceSample:
        return self._subject(ref.subject_id).samples[ref.z]

    def plan(self, plan: FoldPlan) -> FoldPlan:
        """Fill the fold's slice lists from the non-excluded slices."""
        plan.train_slices = [ref for s in plan.train_subjects for ref in self.slices(s)]
        plan.val_slices = [ref for s in plan.val_subjects for ref in self.slices(s)]
        return plan


# =============================================================================
# Loss Curves
# =============================================================================

@dataclass
class LossCurve:
    """Per-epoch loss per foreground voxel on the sampled slices."""
    train: List[float] = field(default_factory=list)
    val: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train)

    @property
    def final_train(self) -> float:
        return self.train[-1] if self.train else float("nan")

    @property
    def final_val(self) -> float:
        return self.val[-1] if self.val else float("nan")

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, (train, val) in enumerate(zip(self.train, self.val)):
            writer.writerow([epoch, repr(train), repr(val)])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossCurve":
        curve = cls()
        for row in csv.DictReader(io.StringIO(text)):
            curve.train.append(float(row["train_loss"]))
            curve.val.append(float(row["val_loss"]))
        return curve


def _slice_loss(params: UNetParameters, sample: SliceSample) -> Tuple[float, int]:
    """Squared-error sum and foreground count of one slice."""
    loss = masked_mse(forward(params, sample.channels), sample.target, sample.mask)
    count = int(np.count_nonzero(sample.mask.data))
    return float(loss.data) * count, count


def evaluate_loss(
    params: UNetParameters,
    data: TrainingData,
    refs: Sequence[SliceRef],
    pool: Optional[WorkerPool] = None,
) -> float:
    """
    Loss per foreground voxel pooled over `refs`, parameters frozen.

    Slices are evaluated concurrently; sums are taken in slice order.
    """
    if not refs:
        return float("nan")
    pool = pool or WorkerPool()
    results = pool.map(lambda ref: _slice_loss(params, data.sample(ref)), refs)
    total = math.fsum(r[0] for r in results)
    count = sum(r[1] for r in results)
    return total / count if count else float("nan")


# =============================================================================
# Fold Training
# =============================================================================

def _check_spec(spec: UNetSpec, subset: EchoSubset) -> None:
    expected = 2 * len(subset.indices)
    if spec.in_channels != expected:
        raise ConfigError(
            f"Network expects {spec.in_channels} input channels but echo subset {subset} gives {expected}"
        )


def train_fold(
    fold: FoldPlan,
    spec: UNetSpec,
    cfg: TrainConfig,
    data: TrainingData,
    checkpointer=None,
    workers: Optional[int] = None,
) -> Tuple[UNetParameters, LossCurve]:
    """
    Train one fold.

    Args:
        fold: Plan with filled slice lists
        spec: Network architecture (in_channels = 2 x echoes)
        cfg: Training configuration
        data: Prepared training data
        checkpointer: Receives the final parameters under "fold-<i>"
        workers: Worker cap for loss-curve evaluation

    Returns:
        (final parameters, loss curve)

    Raises:
        TrainingDivergedError: non-finite loss or gradient
    """
    _check_spec(spec, data.subset)
    if not fold.train_slices or not fold.val_slices:
        raise FoldError(f"Fold {fold.fold_index} has no training or no validation slices")
    fold.audit()

    pool = WorkerPool(workers)
    init_seed = np.random.SeedSequence([cfg.seed, fold.fold_index])
    params = build_unet(spec, init_seed=init_seed, dtype=data.dtype)
    state = AdamState.create(params.tensors, lr=cfg.lr0, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    curve = LossCurve()
    val_refs = fold.val_slices[:: cfg.val_stride]
    train_refs = fold.train_slices[:: cfg.train_stride]

    logger.info(
        f"Fold {fold.fold_index}: {len(fold.train_slices)} training / {len(fold.val_slices)} validation slices, "
        f"{params.count()} parameters"
    )
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        state = replace(state, lr=learning_rate(cfg, epoch))
        for i in epoch_order(len(fold.train_slices), cfg.seed, epoch):
            ref = fold.train_slices[i]
            sample = data.sample(ref)
            with Tape() as tape:
                loss = masked_mse(forward(params, sample.channels), sample.target, sample.mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, str(ref), value)
            grads = tape.backward(loss)
            try:
                tensors, state = adam_step(
                    params.tensors, {name: grads[t] for name, t in params.tensors.items()}, state
                )
            except NonFiniteGradientError as e:
                raise TrainingDivergedError(epoch, str(ref), value) from e
            params = UNetParameters(spec, tensors)

        val_loss = evaluate_loss(params, data, val_refs, pool)
        train_loss = evaluate_loss(params, data, train_refs, pool)
        if not (math.isfinite(val_loss) and math.isfinite(train_loss)):
            raise TrainingDivergedError(epoch, "loss-curve", val_loss)
        curve.train.append(train_loss)
        curve.val.append(val_loss)
        curve.epoch_seconds.append(time.perf_counter() - started)
        report_epoch(fold.fold_index, epoch, train_loss, val_loss)

    if checkpointer is not None:
        checkpointer.put(f"fold-{fold.fold_index}", params, {
            "fold": fold.fold_index,
            "epochs": cfg.epochs,
            "echoes": cfg.echoes,
            "seed": cfg.seed,
        })
    return params, curve


def predict_slices(params: UNetParameters, data: TrainingData, refs: Sequence[SliceRef],
                   pool: Optional[WorkerPool] = None) -> List[np.ndarray]:
    """Clamped FF predictions [H, W] for each slice, cropped to the original size."""
    pool = pool or WorkerPool()

    def run(ref: SliceRef) -> np.ndarray:
        sample = data.sample(ref)
        out = forward(params, sample.channels)
        return np.clip(sample.crop.crop(out.data[0]).astype(np.float64), 0.0, 1.0)

    return pool.map(run, refs)


# =============================================================================
# Fold Outputs
# =============================================================================

@dataclass
class FoldSummary:
    """JSON-friendly record of one trained fold."""
    fold_index: int
    k: int
    echoes: str
    train_subjects: List[str]
    val_subjects: List[str]
    n_train_slices: int
    n_val_slices: int
    excluded: Dict[str, List[int]]
    final_train_loss: float
    final_val_loss: float
    train_seconds: float
    inference_seconds_per_slice: float
    network: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "FoldSummary":
        return cls(**payload)


def run_fold(
    plan: FoldPlan,
    spec: UNetSpec,
    cfg: TrainConfig,
    data: TrainingData,
    out_dir: PathLike,
    workers: Optional[int] = None,
) -> FoldSummary:
    """Train one fold and write its loss curve, checkpoint, predictions and summary."""
    from dxs_checkpointer.file import FileCheckpointer

    out_dir = Path(out_dir)
    fold_dir = out_dir / f"fold-{plan.fold_index}"
    data.plan(plan)
    report(f"Training fold {plan.fold_index + 1}/{plan.k} ({cfg.echoes})")

    started = time.perf_counter()
    params, curve = train_fold(plan, spec, cfg, data, FileCheckpointer(fold_dir / "checkpoint"), workers)
    train_seconds = time.perf_counter() - started
    atomic_write_text(fold_dir / "loss_curve.csv", curve.to_csv())

    pool = WorkerPool(workers)
    started = time.perf_counter()
    planes = predict_slices(params, data, plan.val_slices, pool)
    inference_seconds = (time.perf_counter() - started) / max(1, len(planes))

    by_subject: Dict[str, Dict[int, np.ndarray]] = {s: {} for s in plan.val_subjects}
    for ref, plane in zip(plan.val_slices, planes):
        by_subject[ref.subject_id][ref.z] = plane
    for subject_id, slices in by_subject.items():
        write_predictions(out_dir, subject_id, data.volume_shape(subject_id), slices, plan.fold_index)

    summary = FoldSummary(
        fold_index=plan.fold_index,
        k=plan.k,
        echoes=cfg.echoes,
        train_subjects=plan.train_subjects,
        val_subjects=plan.val_subjects,
        n_train_slices=len(plan.train_slices),
        n_val_slices=len(plan.val_slices),
        excluded={s: data.excluded(s) for s in plan.train_subjects + plan.val_subjects if data.excluded(s)},
        final_train_loss=curve.final_train,
        final_val_loss=curve.final_val,
        train_seconds=train_seconds,
        inference_seconds_per_slice=inference_seconds,
        network=spec.model_dump(),
    )
    atomic_write_json(fold_dir / "fold.json", summary.to_dict())
    logger.info(
        f"Fold {plan.fold_index} done: train {curve.final_train:.6f}, val {curve.final_val:.6f}, "
        f"{train_seconds:.1f}s"
    )
    return summary


def train_fold_job(
    dataset_dir: str,
    reference_dir: Optional[str],
    out_dir: str,
    train_config: Dict[str, Any],
    network: Dict[str, Any],
    fold_index: int,
) -> Dict[str, Any]:
    """
    Self-contained fold run from plain arguments (Celery task body).

    Returns:
        FoldSummary as a dictionary
    """
    cfg = TrainConfig.model_validate(train_config)
    spec = UNetSpec.model_validate(network)
    data = TrainingData.from_directory(
        dataset_dir, cfg.echoes, spec.depth, reference_dir=reference_dir, target=cfg.target,
        min_fraction=cfg.empty_slice_fraction,
    )
    plans = kfold_split(data.subject_ids, cfg.k_folds, cfg.seed)
    if not 0 <= fold_index < len(plans):
        raise FoldError(f"Fold index {fold_index} out of range for k={cfg.k_folds}")
    return run_fold(plans[fold_index], spec, cfg, data, out_dir).to_dict()


# =============================================================================
# Cross-Validation
# =============================================================================

@dataclass
class CrossValResult:
    folds: List[FoldSummary]
    out_dir: Path

    @property
    def predicted_subjects(self) -> List[str]:
        return sorted(s for f in self.folds for s in f.val_subjects)

    @property
    def pooled_slice_count(self) -> int:
        return sum(f.n_val_slices for f in self.folds)

    @property
    def mean_final_val_loss(self) -> float:
        return float(np.mean([f.final_val_loss for f in self.folds]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "predicted_subjects": self.predicted_subjects,
            "pooled_slice_count": self.pooled_slice_count,
            "mean_final_val_loss": self.mean_final_val_loss,
        }


FoldDispatch = Callable[[FoldPlan], Dict[str, Any]]


def run_crossval(
    data: TrainingData,
    spec: UNetSpec,
    cfg: TrainConfig,
    out_dir: PathLike,
    dispatch: Optional[FoldDispatch] = None,
    workers: Optional[int] = None,
) -> CrossValResult:
    """
    Train all k folds (or only cfg.fold) and pool validation predictions.

    Args:
        data: Training data
        spec: Network architecture
        cfg: Training configuration
        out_dir: Output root
        dispatch: Runs one fold elsewhere and returns its summary dict;
            folds run locally through the worker pool when omitted
        workers: Worker cap for parallel folds

    Returns:
        CrossValResult; crossval.json is written to out_dir
    """
    out_dir = Path(out_dir)
    plans = kfold_split(data.subject_ids, cfg.k_folds, cfg.seed)
    if cfg.fold is not None:
        if cfg.fold >= len(plans):
            raise FoldError(f"Fold index {cfg.fold} out of range for k={cfg.k_folds}")
        plans = [plans[cfg.fold]]

    if dispatch is None:
        # Parallel folds share the pool cap; loss curves then evaluate inline.
        pool = WorkerPool(workers)
        inner = 1 if not pool.inline and len(plans) > 1 else workers
        summaries = pool.map(lambda plan: run_fold(plan, spec, cfg, data, out_dir, inner), plans)
    else:
        summaries = [FoldSummary.from_dict(dispatch(plan)) for plan in plans]

    result = CrossValResult(folds=summaries, out_dir=out_dir)
    if cfg.fold is None and sorted(data.subject_ids) != result.predicted_subjects:
        raise FoldError("Pooled validation predictions do not cover every subject exactly once")
    atomic_write_json(out_dir / "crossval.json", {"echoes": cfg.echoes, **result.to_dict()})
    return result

"""Augmentation, the training loop and the transfer-learning strategies."""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .core_data import DifferenceMapRecord
from .errors import LeakageError, TrainingDivergenceError, UndefinedMetricError, ValidationError
from .evaluation import roc_auc
from .models import ArchitectureSpec, ModelHandle, build_model, freeze_backbone, predict_batch, save_checkpoint
from .preprocess import Volume3D, load_volume, resample_to_grid
from .seeding import derive_seed

log = logging.getLogger(__name__)

LEARNING_RATES = (1e-4, 1e-5, 1e-6)
WEIGHT_DECAYS = (0.0, 0.01)
EPOCH_LOG_COLUMNS = ("epoch", "train_loss", "val_auc", "val_loss", "seconds")


# -- data -------------------------------------------------------------------


@dataclass
class VolumeDataset:
    """In-memory samples at the model input grid."""

    x: np.ndarray  # (N, nx, ny, nz) float32
    y: np.ndarray  # (N,) float32 in {0, 1}
    map_ids: list[str]
    subject_ids: list[str]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if self.x.ndim != 4:
            raise ValidationError(f"dataset volumes must be (N, nx, ny, nz), got {self.x.shape}")
        if len({len(self.x), len(self.y), len(self.map_ids), len(self.subject_ids)}) != 1:
            raise ValidationError("dataset arrays and ids are misaligned")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def subjects(self) -> set[str]:
        return set(self.subject_ids)

    def take(self, idx: Sequence[int]) -> "VolumeDataset":
        idx = list(idx)
        return VolumeDataset(
            self.x[idx] if idx else self.x[:0],
            self.y[idx] if idx else self.y[:0],
            [self.map_ids[i] for i in idx],
            [self.subject_ids[i] for i in idx],
        )

    def for_subjects(self, subjects: Iterable[str]) -> "VolumeDataset":
        wanted = set(subjects)
        return self.take([i for i, s in enumerate(self.subject_ids) if s in wanted])

    @staticmethod
    def concat(*parts: "VolumeDataset") -> "VolumeDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValidationError("nothing to concatenate")
        return VolumeDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            [m for p in parts for m in p.map_ids],
            [s for p in parts for s in p.subject_ids],
        )


class VolumeSource:
    """Loads record volumes at the model grid and logs every access.

    The access log is what the experiment audits to prove that held-out
    records (or WAD in a baseline run) were never read.
    """

    def __init__(self, input_shape: Sequence[int]):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.access_log: list[tuple[str, str]] = []
        self._cache: dict[str, np.ndarray] = {}

    def load(self, record: DifferenceMapRecord, phase: str = "unspecified") -> np.ndarray:
        self.access_log.append((phase, record.map_id))
        arr = self._cache.get(record.volume_path)
        if arr is None:
            vol = load_volume(record.volume_path)
            if vol.shape != self.input_shape:
                vol = resample_to_grid(vol, self.input_shape)
            arr = np.asarray(vol.voxels, dtype=np.float32)
            self._cache[record.volume_path] = arr
        return arr

    def dataset(self, records: Iterable[DifferenceMapRecord], phase: str = "unspecified") -> VolumeDataset:
        records = list(records)
        if not records:
            return VolumeDataset(np.zeros((0, *self.input_shape), np.float32), np.zeros(0), [], [])
        return VolumeDataset(
            np.stack([self.load(r, phase) for r in records]),
            np.array([int(r.label) for r in records], dtype=np.float32),
            [r.map_id for r in records],
            [r.subject_id for r in records],
        )

    def accessed(self, phase: str | None = None) -> set[str]:
        return {m for p, m in self.access_log if phase is None or p == phase}


# -- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_prob: float = 0.2
    gaussian_noise_prob: float = 0.2
    noise_sigma: float = 0.1
    zoom_prob: float = 0.2
    zoom_range: tuple[float, float] = (0.7, 1.3)
    elastic_prob: float = 0.2
    elastic_sigma: float = 4.0
    elastic_magnitude: float = 2.0

    def __post_init__(self):
        for name in ("flip_prob", "gaussian_noise_prob", "zoom_prob", "elastic_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ValidationError(f"bad zoom_range {self.zoom_range}")

    @classmethod
    def off(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, zoom_prob=0.0, elastic_prob=0.0)


def flip(arr: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(arr, axis=axis).copy()


def add_gaussian_noise(arr: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return (arr + rng.normal(0.0, sigma, size=arr.shape)).astype(arr.dtype)


def zoom(arr: np.ndarray, factor: float) -> np.ndarray:
    """Zoom about the volume centre, cropping or zero-padding back to the input grid."""
    center = (np.asarray(arr.shape) - 1) / 2.0
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in arr.shape], indexing="ij")
    src = [c + (g - c) / factor for g, c in zip(coords, center)]
    out = ndimage.map_coordinates(arr, src, order=1, mode="constant", cval=0.0, prefilter=False)
    return out.astype(arr.dtype)


def elastic(arr: np.ndarray, rng: np.random.Generator, sigma: float, magnitude: float) -> np.ndarray:
    """Smooth random displacement field (Gaussian-filtered noise scaled to ``magnitude`` voxels)."""
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in arr.shape], indexing="ij")
    src = []
    for g in coords:
        d = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=arr.shape), sigma, mode="constant")
        peak = np.abs(d).max()
        if peak > 0:
            d *= magnitude / peak
        src.append(g + d)
    return ndimage.map_coordinates(arr, src, order=1, mode="nearest", prefilter=False).astype(arr.dtype)


def augment_array(arr: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    # one uniform per transform, always drawn, so streams stay aligned across policies
    u = rng.random(4)
    out = arr
    if u[0] < policy.flip_prob:
        out = flip(out, int(rng.integers(out.ndim)))
    if u[1] < policy.gaussian_noise_prob:
        out = add_gaussian_noise(out, policy.noise_sigma, rng)
    if u[2] < policy.zoom_prob:
        out = zoom(out, float(rng.uniform(*policy.zoom_range)))
    if u[3] < policy.elastic_prob:
        out = elastic(out, rng, policy.elastic_sigma, policy.elastic_magnitude)
    return out


def augment_volume(volume: Volume3D, policy: AugmentationPolicy, rng: np.random.Generator) -> Volume3D:
    return volume.with_voxels(augment_array(np.asarray(volume.voxels), policy, rng))


# -- training loop ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 4
    max_epochs: int = 60
    early_stop_patience: int = 10
    seed: int = 0
    allow_off_grid: bool = False

    def __post_init__(self):
        if not self.allow_off_grid:
            if not any(math.isclose(self.learning_rate, lr) for lr in LEARNING_RATES):
                raise ValidationError(f"learning_rate {self.learning_rate} not in {LEARNING_RATES}")
            if self.weight_decay not in WEIGHT_DECAYS:
                raise ValidationError(f"weight_decay {self.weight_decay} not in {WEIGHT_DECAYS}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValidationError("batch_size >= 1, max_epochs >= 0, early_stop_patience >= 1 required")


@dataclass
class TrainResult:
    train_losses: list[float] = field(default_factory=list)
    val_aucs: list[float] = field(default_factory=list)
    val_losses: list[float | None] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    checkpoint: Path | None = None
    seconds: float = 0.0
    n_train: int = 0
    stopped_early: bool = False
    epoch_seconds: list[float] = field(default_factory=list)
    pretrain: "TrainResult | None" = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


def validation_auc(model: ModelHandle, val: VolumeDataset) -> float:
    """Validation AUC; 0.5 when the validation set holds a single class."""
    probs = predict_batch(model, val.x[:, None])
    try:
        return roc_auc((probs, val.y.astype(np.int64)))[1]
    except UndefinedMetricError:
        log.info("validation set has a single class; scoring it as AUC 0.5")
        return 0.5


def validation_scores(model: ModelHandle, val: VolumeDataset) -> tuple[float, float]:
    """(AUC, mean BCE) on the validation set; the loss only breaks AUC ties."""
    probs = np.clip(predict_batch(model, val.x[:, None]), 1e-7, 1 - 1e-7)
    y = val.y.astype(np.float64)
    loss = float(-np.mean(y * np.log(probs) + (1 - y) * np.log(1 - probs)))
    try:
        auc = roc_auc((probs, y.astype(np.int64)))[1]
    except UndefinedMetricError:
        log.info("validation set has a single class; scoring it as AUC 0.5")
        auc = 0.5
    return auc, loss


def write_epoch_log(path: Path, result: TrainResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_LOG_COLUMNS)
        rows = zip(result.train_losses, result.val_aucs, result.val_losses, result.epoch_seconds)
        for i, (loss, auc, vloss, sec) in enumerate(rows, 1):
            w.writerow([i, repr(loss), repr(auc), "" if vloss is None else repr(vloss), f"{sec:.3f}"])


def train_model(
    model: ModelHandle,
    train: VolumeDataset,
    val: VolumeDataset,
    config: TrainConfig,
    policy: AugmentationPolicy | None = None,
    *,
    evaluate: Callable[[ModelHandle, VolumeDataset], float | tuple[float, float]] = validation_scores,
    on_epoch: Callable[[int, float], None] | None = None,
    frozen_backbone: bool = False,
    checkpoint_path=None,
    epoch_log_path=None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Adam + binary cross-entropy with early stopping on validation AUC.

    On return the model holds the weights of the best-AUC epoch. An epoch
    counts as an improvement if its AUC is strictly higher, or equal with a
    strictly lower validation loss when ``evaluate`` returns ``(auc, loss)``
    (small validation sets saturate at AUC 1.0 long before the scores are
    well separated). Training stops once ``early_stop_patience`` epochs pass
    without an improvement.
    ``on_epoch(epoch, val_auc)`` may raise to abort (used for pruning).
    """
    if len(train) == 0:
        raise ValidationError("empty training set")
    if len(val) == 0:
        raise ValidationError("empty validation set")
    overlap = train.subjects & val.subjects
    if overlap:
        raise LeakageError(f"subjects in both training and validation: {sorted(overlap)[:5]}")
    policy = policy or AugmentationPolicy.off()
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    module = model.module
    params = [p for p in module.parameters() if p.requires_grad]
    if not params:
        raise ValidationError("model has no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle"))
    aug_rng = np.random.default_rng(derive_seed(config.seed, "augment"))
    dtype = next(module.parameters()).dtype

    result = TrainResult(n_train=len(train))
    best_state = None
    best_loss = None
    since_best = 0
    t0 = time.perf_counter()
    y_all = torch.from_numpy(train.y)
    for epoch in range(1, max_epochs + 1):
        te = time.perf_counter()
        module.train()
        if frozen_backbone:
            module.backbone.eval()
        order = torch.randperm(len(train), generator=gen).tolist()
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = np.stack([augment_array(train.x[i], policy, aug_rng) for i in idx])[:, None]
            xb = torch.from_numpy(np.ascontiguousarray(xb)).to(dtype)
            yb = y_all[idx].to(dtype)
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(module(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss.item())
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        result.train_losses.append(total / count)
        scored = evaluate(model, val)
        auc, vloss = (float(scored[0]), float(scored[1])) if isinstance(scored, tuple) else (float(scored), None)
        result.val_aucs.append(auc)
        result.val_losses.append(vloss)
        result.epoch_seconds.append(time.perf_counter() - te)
        tie_better = (
            auc == result.best_val_auc and vloss is not None and best_loss is not None and vloss < best_loss
        )
        if best_state is None or auc > result.best_val_auc or tie_better:
            result.best_epoch, result.best_val_auc, best_loss = epoch, auc, vloss
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
        log.debug("epoch %d loss %.4f val_auc %.4f", epoch, result.train_losses[-1], auc)
        if on_epoch is not None:
            on_epoch(epoch, auc)
        if since_best >= config.early_stop_patience:
            result.stopped_early = epoch < max_epochs
            break
    if best_state is not None:
        model.load_state(best_state)
    result.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        result.checkpoint = save_checkpoint(
            model, checkpoint_path, epoch=result.best_epoch, val_auc=result.best_val_auc
        )
    if epoch_log_path is not None:
        write_epoch_log(Path(epoch_log_path), result)
    return result


def overfit_batch(
    model: ModelHandle,
    x: np.ndarray,
    y: np.ndarray,
    lr: float = 1e-4,
    steps: int = 200,
    seed: int = 0,
    stop_below: float | None = None,
):
    """Plain full-batch training on one batch; returns the loss per step.

    With ``stop_below`` the loop ends at the first step whose loss is under it.
    """
    torch.manual_seed(seed)
    module = model.module
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    loss_fn = nn.BCEWithLogitsLoss()
    xb = torch.as_tensor(np.asarray(x)[:, None], dtype=torch.float32)
    yb = torch.as_tensor(np.asarray(y), dtype=torch.float32)
    losses = []
    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(module(xb), yb)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if stop_below is not None and losses[-1] < stop_below:
            break
    return losses


# -- transfer learning ------------------------------------------------------


class TLStrategy(str, enum.Enum):
    MIXED_TRAINING = "mixed_training"
    FINE_TUNING = "fine_tuning"
    FEATURE_EXTRACTION = "feature_extraction"
    NONE = "none"

    @classmethod
    def from_flags(cls, mixed_training: bool | None, feature_extraction: bool | None) -> "TLStrategy":
        if mixed_training is None:
            return cls.NONE
        if mixed_training:
            return cls.MIXED_TRAINING
        return cls.FEATURE_EXTRACTION if feature_extraction else cls.FINE_TUNING


def split_pretrain(wad: VolumeDataset, fraction: float, seed: int) -> tuple[VolumeDataset, VolumeDataset]:
    """Hold out ``fraction`` of WAD subjects for pretraining validation.

    The hold-out is drawn per majority-label stratum and takes at least one
    subject of each class when both exist, so the pretraining AUC is defined.
    """
    subjects = sorted(wad.subjects)
    if len(subjects) < 2:
        raise ValidationError("WAD pretraining needs at least 2 subjects to hold one out")
    rng = np.random.default_rng(seed)
    votes: dict[str, list[float]] = {}
    for s, y in zip(wad.subject_ids, wad.y):
        votes.setdefault(s, []).append(float(y))
    strata = [[s for s in subjects if (np.mean(votes[s]) >= 0.5) == k] for k in (False, True)]
    strata = [rng.permutation(g).tolist() for g in strata if g]
    n_hold = max(len(strata) if len(subjects) > len(strata) else 1, int(math.floor(fraction * len(subjects))))
    quotas = [max(1, int(round(n_hold * len(g) / len(subjects)))) for g in strata]
    while sum(quotas) > n_hold:
        quotas[int(np.argmax(quotas))] -= 1
    held = {s for g, q in zip(strata, quotas) for s in g[:q]}
    return wad.for_subjects(set(subjects) - held), wad.for_subjects(held)


def apply_tl_strategy(
    strategy: TLStrategy | str,
    model_spec: ArchitectureSpec,
    wad: VolumeDataset | None,
    had_train: VolumeDataset,
    had_val: VolumeDataset,
    config: TrainConfig,
    policy: AugmentationPolicy | None = None,
    *,
    pretrain_val_fraction: float = 0.1,
    target_max_epochs: int | None = None,
    on_epoch=None,
    model: ModelHandle | None = None,
    evaluate=validation_scores,
) -> tuple[ModelHandle, TrainResult]:
    """Build and train a model under one transfer-learning strategy.

    ``wad`` must already be filtered against the fold's validation and test
    subjects. ``on_epoch`` sees only target-phase (HAD validation) epochs.
    """
    strategy = TLStrategy(strategy)
    if model is None:
        model = build_model(model_spec, derive_seed(config.seed, "init"))
    wad_size = 0 if wad is None else len(wad)

    if strategy is TLStrategy.NONE:
        res = train_model(model, had_train, had_val, config, policy, on_epoch=on_epoch,
                          max_epochs=target_max_epochs, evaluate=evaluate)
        return model, res

    if strategy is TLStrategy.MIXED_TRAINING:
        train = VolumeDataset.concat(wad, had_train) if wad_size else had_train
        res = train_model(model, train, had_val, config, policy, on_epoch=on_epoch,
                          max_epochs=target_max_epochs, evaluate=evaluate)
        return model, res

    if wad_size == 0:
        raise ValidationError(f"{strategy.value} needs a non-empty WAD for pretraining")
    wad_train, wad_val = split_pretrain(wad, pretrain_val_fraction, derive_seed(config.seed, "pretrain-split"))
    pre_cfg = TrainConfig(
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        early_stop_patience=config.early_stop_patience,
        seed=derive_seed(config.seed, "pretrain"),
        allow_off_grid=True,
    )
    pre = train_model(model, wad_train, wad_val, pre_cfg, policy, evaluate=evaluate)
    frozen = strategy is TLStrategy.FEATURE_EXTRACTION
    if frozen:
        freeze_backbone(model)
    res = train_model(model, had_train, had_val, config, policy, on_epoch=on_epoch,
                      frozen_backbone=frozen, max_epochs=target_max_epochs, evaluate=evaluate)
    res.pretrain = pre
    return model, res

"""Cross-validated experiments: folds, per-fold tuning, pooled test predictions.

Every fold tunes on (train, validation) subjects only. Test records are
loaded after the fold's study has finished; the volume access log is
audited before and after so a leak fails loudly instead of inflating AUC.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core_data import BinaryLabel, CohortManifest, threshold_manifest
from .errors import LeakageError, ValidationError
from .evaluation import (
    MetricsReport,
    Prediction,
    PredictionSet,
    full_report,
    pool_fold_predictions,
    pr_aupr,
    roc_auc,
    write_curve,
    write_metrics_report,
    write_predictions,
)
from .hpo import Budget, MedianPruner, SearchSpace, StudyRecord, TrialRecord, run_study
from .models import ArchitectureSpec, ModelHandle, predict_batch, save_checkpoint
from .seeding import derive_seed
from .training import (
    AugmentationPolicy,
    TLStrategy,
    TrainConfig,
    TrainResult,
    VolumeDataset,
    VolumeSource,
    write_epoch_log,
    apply_tl_strategy,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CVPlan:
    k: int = 5
    val_fraction: float = 0.25
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("k must be >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class FoldAssignment:
    fold_id: int
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]

    def __post_init__(self):
        tr, va, te = map(set, (self.train_subjects, self.val_subjects, self.test_subjects))
        if tr & va or tr & te or va & te:
            raise LeakageError(f"fold {self.fold_id}: train/val/test subject sets overlap")

    @property
    def held_out(self) -> set[str]:
        return set(self.val_subjects) | set(self.test_subjects)


def _strata(subjects: Sequence[str], labels: dict[str, int] | None, stratify: bool) -> list[list[str]]:
    if not stratify or labels is None:
        return [list(subjects)]
    groups: dict[int, list[str]] = {}
    for s in subjects:
        groups.setdefault(labels.get(s, 0), []).append(s)
    return [groups[k] for k in sorted(groups)]


def _proportional_pick(strata: list[list[str]], n: int) -> set[str]:
    """Take ``n`` subjects from the (already shuffled) strata, largest-remainder allocation."""
    total = sum(len(s) for s in strata)
    quotas = [n * len(s) / total for s in strata]
    alloc = [int(math.floor(q)) for q in quotas]
    for i in sorted(range(len(strata)), key=lambda i: quotas[i] - alloc[i], reverse=True)[: n - sum(alloc)]:
        alloc[i] += 1
    return {s for stratum, a in zip(strata, alloc) for s in stratum[:a]}


def make_subject_folds(
    subjects: Sequence[str], plan: CVPlan, subject_labels: dict[str, int] | None = None
) -> list[FoldAssignment]:
    """Partition subjects into ``k`` test folds (sizes differ by at most one).

    Within each fold, ``floor(val_fraction * n_remaining)`` (at least one)
    of the remaining subjects become validation, the rest training. With
    ``plan.stratify`` and ``subject_labels`` both steps keep the per-subject
    majority label balanced.
    """
    subjects = sorted(set(subjects))
    if len(subjects) < plan.k:
        raise ValidationError(f"need at least k={plan.k} subjects, got {len(subjects)}")
    rng = np.random.default_rng(derive_seed(plan.seed, "folds"))
    order = []
    for stratum in _strata(subjects, subject_labels, plan.stratify):
        order.extend(rng.permutation(stratum).tolist())
    tests = [order[i :: plan.k] for i in range(plan.k)]
    folds = []
    for f, test in enumerate(tests):
        test_set = set(test)
        remaining = [s for s in subjects if s not in test_set]
        n_val = max(1, int(math.floor(plan.val_fraction * len(remaining))))
        if n_val >= len(remaining):
            raise ValidationError(f"fold {f}: not enough subjects left for training")
        frng = np.random.default_rng(derive_seed(plan.seed, "val", f))
        strata = [frng.permutation(s).tolist() for s in _strata(remaining, subject_labels, plan.stratify)]
        val = _proportional_pick(strata, n_val)
        train = [s for s in remaining if s not in val]
        folds.append(FoldAssignment(f, tuple(train), tuple(sorted(val)), tuple(sorted(test))))
    return folds


def subject_majority_labels(manifest: CohortManifest) -> dict[str, int]:
    votes: dict[str, list[int]] = {}
    for r in manifest:
        votes.setdefault(r.subject_id, []).append(int(r.label))
    return {s: int(2 * sum(v) >= len(v)) for s, v in votes.items()}


def filter_wad_for_fold(wad: CohortManifest, fold: FoldAssignment) -> CohortManifest:
    held = fold.held_out
    return wad.subset(lambda r: r.subject_id not in held)


# -- experiment -------------------------------------------------------------


@dataclass
class ExperimentSpec:
    model: ArchitectureSpec
    kind: str  # baseline | tl
    had: CohortManifest
    wad: CohortManifest | None = None
    external: CohortManifest | None = None
    cv_plan: CVPlan = field(default_factory=CVPlan)
    space: SearchSpace | None = None
    sampler: str = "grid"
    budget: Budget = field(default_factory=Budget)
    pruner: MedianPruner | None = field(default_factory=MedianPruner)
    batch_size: int = 4
    max_epochs: int = 60
    early_stop_patience: int = 10
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    pretrain_val_fraction: float = 0.1
    seed: int = 0
    threshold: float = 0.5
    parallelism: int = 1
    n_startup: int = 10
    name: str = "experiment"

    def __post_init__(self):
        if self.kind not in ("baseline", "tl"):
            raise ValidationError(f"experiment kind must be baseline or tl, got {self.kind!r}")
        if self.space is None:
            self.space = SearchSpace(tl_active=self.kind == "tl")
        if self.space.tl_active != (self.kind == "tl"):
            raise ValidationError("search space tl_active must match the experiment kind")
        if self.kind == "tl" and (self.wad is None or len(self.wad) == 0):
            raise ValidationError("a tl experiment needs a non-empty WAD")


@dataclass
class FoldResult:
    fold: FoldAssignment
    study: StudyRecord
    best: TrialRecord | None
    train_result: TrainResult | None
    predictions: PredictionSet
    model: ModelHandle | None = field(default=None, repr=False)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    folds: list[FoldResult]
    pooled: PredictionSet
    metrics: MetricsReport
    access_log: list[tuple[str, str]]

    @property
    def models(self) -> list[ModelHandle]:
        return [f.model for f in self.folds]

    @property
    def studies(self) -> list[StudyRecord]:
        return [f.study for f in self.folds]


def predict_dataset(model: ModelHandle, ds: VolumeDataset, fold_id, threshold) -> PredictionSet:
    probs = predict_batch(model, ds.x[:, None])
    return PredictionSet(
        tuple(
            Prediction(m, s, fold_id, float(p), BinaryLabel.from_int(int(y)), BinaryLabel.from_int(int(p >= threshold)))
            for m, s, p, y in zip(ds.map_ids, ds.subject_ids, probs, ds.y)
        )
    )


def _run_fold(spec: ExperimentSpec, fold: FoldAssignment, source: VolumeSource, out_dir: Path | None) -> FoldResult:
    had = spec.had
    test_ids = {r.map_id for r in had if r.subject_id in set(fold.test_subjects)}
    train_ds = source.dataset(had.for_subjects(fold.train_subjects), f"fold{fold.fold_id}:train")
    val_ds = source.dataset(had.for_subjects(fold.val_subjects), f"fold{fold.fold_id}:val")

    wad_cache: dict[float, VolumeDataset] = {}

    def wad_for(cutoff: float) -> VolumeDataset:
        if cutoff not in wad_cache:
            wad_fold = filter_wad_for_fold(spec.wad, fold)
            wad_cache[cutoff] = source.dataset(threshold_manifest(wad_fold, cutoff), f"fold{fold.fold_id}:wad")
        return wad_cache[cutoff]

    best_holder: dict = {}

    def objective(trial):
        cfg = TrainConfig(
            learning_rate=trial.config.learning_rate,
            weight_decay=trial.config.weight_decay,
            batch_size=spec.batch_size,
            max_epochs=spec.max_epochs,
            early_stop_patience=spec.early_stop_patience,
            seed=trial.config.seed,
            allow_off_grid=True,
        )
        strategy = trial.config.strategy
        wad = wad_for(trial.config.fraction_of_wad) if strategy is not TLStrategy.NONE else None
        model, res = apply_tl_strategy(
            strategy,
            spec.model,
            wad,
            train_ds,
            val_ds,
            cfg,
            spec.policy,
            pretrain_val_fraction=spec.pretrain_val_fraction,
            on_epoch=trial.report,
        )
        trial.artifact = (model, res)
        return res.val_aucs, res.best_val_auc

    def keep_best(rec: TrialRecord):
        if rec.status == "completed" and rec.artifact is not None:
            cur = best_holder.get("rec")
            if cur is None or rec.value > cur.value:
                best_holder["rec"] = rec
                best_holder["artifact"] = rec.artifact
        rec.artifact = None

    fold_dir = out_dir / f"fold_{fold.fold_id}" if out_dir is not None else None
    study = run_study(
        objective,
        spec.space,
        spec.sampler,
        spec.pruner,
        spec.budget,
        derive_seed(spec.seed, "study", fold.fold_id),
        log_path=(fold_dir / "study_log.jsonl") if fold_dir is not None else None,
        parallelism=spec.parallelism,
        n_startup=spec.n_startup,
        on_trial=keep_best,
    )

    tag = f"fold{fold.fold_id}:"
    tuned = {m for p, m in source.access_log if p.startswith(tag)}
    touched = tuned & test_ids
    if touched:
        raise LeakageError(f"fold {fold.fold_id}: test records read during tuning: {sorted(touched)[:5]}")
    if spec.wad is not None:
        held_wad = {r.map_id for r in spec.wad if r.subject_id in fold.held_out}
        leaked = {m for p, m in source.access_log if p == f"fold{fold.fold_id}:wad"} & held_wad
        if leaked:
            raise LeakageError(f"fold {fold.fold_id}: WAD maps of held-out subjects used: {sorted(leaked)[:5]}")

    test_ds = source.dataset(had.for_subjects(fold.test_subjects), f"fold{fold.fold_id}:test")
    best = study.best_trial
    if best is None or "artifact" not in best_holder:
        raise RuntimeError(f"fold {fold.fold_id}: no completed trial to evaluate")
    model, res = best_holder["artifact"]
    preds = predict_dataset(model, test_ds, fold.fold_id, spec.threshold)
    if fold_dir is not None:
        save_checkpoint(model, fold_dir / "best_model.pt", epoch=res.best_epoch, val_auc=res.best_val_auc,
                        trial_id=best.config.trial_id, params=best.config.params)
        write_epoch_log(fold_dir / "epoch_log.csv", res)
        write_predictions(preds, fold_dir / "test_predictions.csv", spec.threshold)
    return FoldResult(fold, study, best, res, preds, model)


def run_experiment(
    spec: ExperimentSpec, source: VolumeSource | None = None, out_dir=None
) -> ExperimentResult:
    torch.use_deterministic_algorithms(True, warn_only=True)
    source = source or VolumeSource(spec.model.input_shape)
    out = Path(out_dir) if out_dir is not None else None
    labels = subject_majority_labels(spec.had)
    folds = make_subject_folds(spec.had.subjects, spec.cv_plan, labels)
    results = []
    for fold in folds:
        log.info("%s fold %d: %d train / %d val / %d test subjects", spec.name, fold.fold_id,
                 len(fold.train_subjects), len(fold.val_subjects), len(fold.test_subjects))
        results.append(_run_fold(spec, fold, source, out))
    pooled = pool_fold_predictions([r.predictions for r in results])
    if len(pooled) != len(spec.had):
        raise LeakageError(f"pooled {len(pooled)} predictions for {len(spec.had)} HAD records")
    metrics = full_report(pooled, spec.threshold)
    result = ExperimentResult(spec, results, pooled, metrics, list(source.access_log))
    if out is not None:
        write_experiment_outputs(result, out)
    return result


def write_experiment_outputs(result: ExperimentResult, out: Path) -> None:
    spec = result.spec
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(result.pooled, out / "predictions.csv", spec.threshold)
    write_metrics_report(result.metrics, out / "metrics.json", model=spec.name, seed=spec.seed)
    write_evaluation_curves(result.pooled, out, title=spec.name)
    folds = [
        {
            "fold_id": f.fold.fold_id,
            "train_subjects": list(f.fold.train_subjects),
            "val_subjects": list(f.fold.val_subjects),
            "test_subjects": list(f.fold.test_subjects),
            "best_params": f.best.config.params if f.best else None,
            "best_val_auc": f.best.value if f.best else None,
        }
        for f in result.folds
    ]
    (out / "folds.json").write_text(json.dumps({"seed": spec.seed, "folds": folds}, indent=1) + "\n")


def write_evaluation_curves(preds: PredictionSet, out: Path, title: str = "") -> dict[str, Path]:
    """ROC/PR curve CSVs plus rendered figures (when both classes are present)."""
    from .plotting import plot_pr, plot_roc

    written = {}
    labels = preds.labels
    if 0 < labels.sum() < len(labels):
        roc_pts, auc = roc_auc(preds)
        pr_pts, aupr = pr_aupr(preds)
        written["roc_csv"] = write_curve(roc_pts, out / "roc_curve.csv", "fpr", "tpr")
        written["pr_csv"] = write_curve(pr_pts, out / "pr_curve.csv", "recall", "precision")
        written["roc_png"] = plot_roc({title or "model": (roc_pts, auc)}, out / "roc.png")
        written["pr_png"] = plot_pr({title or "model": (pr_pts, aupr)}, out / "pr.png",
                                    prevalence=float(labels.mean()))
    return written


# -- external inference -----------------------------------------------------


def run_external_inference(
    fold_models: Sequence[ModelHandle],
    external,
    source: VolumeSource | None = None,
    threshold: float = 0.5,
) -> PredictionSet:
    """Majority vote of the fold models; the mean probability is kept for AUC."""
    if len(fold_models) != 5:
        raise ValidationError(f"majority voting needs exactly 5 fold models, got {len(fold_models)}")
    if isinstance(external, CohortManifest):
        source = source or VolumeSource(fold_models[0].spec.input_shape)
        ds = source.dataset(external, "external")
    else:
        ds = external
    probs = np.stack([predict_batch(m, ds.x[:, None]) for m in fold_models])
    votes = (probs >= threshold).sum(axis=0) > len(fold_models) // 2
    mean_p = probs.mean(axis=0)
    return PredictionSet(
        tuple(
            Prediction(m, s, "vote", float(p), BinaryLabel.from_int(int(y)), BinaryLabel.from_int(int(v)))
            for m, s, p, y, v in zip(ds.map_ids, ds.subject_ids, mean_p, ds.y, votes)
        )
    )


def majority_vote(votes: Sequence[BinaryLabel | int]) -> BinaryLabel:
    counts = Counter(int(BinaryLabel(v)) if isinstance(v, str) else int(v) for v in votes)
    if len(votes) % 2 == 0:
        raise ValidationError("use an odd number of voters")
    return BinaryLabel.from_int(int(counts[1] > counts[0]))

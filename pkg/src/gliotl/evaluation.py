"""Prediction sets, threshold metrics, ROC/PR curves and rater agreement.

``unstable`` is always the positive class. Metrics whose denominator is
zero are reported as ``None`` and listed in ``MetricsReport.undefined``;
they are never silently turned into 0.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_data import BinaryLabel
from .errors import UndefinedMetricError, ValidationError

PREDICTION_COLUMNS = ("map_id", "subject_id", "fold_id", "probability", "vote", "true_label")
REPORT_KEYS = ("ACC", "SENS", "SPEC", "F1", "AUC", "AUPR")
UNDEFINED = "undefined"


@dataclass(frozen=True)
class Prediction:
    map_id: str
    subject_id: str
    fold_id: int | str
    probability: float
    true_label: BinaryLabel
    vote: BinaryLabel | None = None


@dataclass(frozen=True)
class PredictionSet:
    entries: tuple[Prediction, ...] = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            if e.map_id in seen:
                raise ValidationError(f"duplicate map_id {e.map_id!r} in prediction set")
            seen.add(e.map_id)
            p = float(e.probability)
            if not (math.isfinite(p) and 0.0 <= p <= 1.0):
                raise ValidationError(f"{e.map_id}: probability {p} outside [0, 1]")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_arrays(cls, map_ids, subject_ids, fold_ids, probabilities, labels, votes=None) -> "PredictionSet":
        votes = [None] * len(map_ids) if votes is None else votes
        return cls(
            tuple(
                Prediction(str(m), str(s), f, float(p), _as_label(y), None if v is None else _as_label(v))
                for m, s, f, p, y, v in zip(map_ids, subject_ids, fold_ids, probabilities, labels, votes)
            )
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([e.probability for e in self.entries], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(e.true_label) for e in self.entries], dtype=np.int64)

    def votes(self, threshold: float = 0.5) -> np.ndarray:
        return np.array(
            [int(e.vote) if e.vote is not None else int(e.probability >= threshold) for e in self.entries],
            dtype=np.int64,
        )


def _as_label(v) -> BinaryLabel:
    if isinstance(v, BinaryLabel):
        return v
    if isinstance(v, str):
        return BinaryLabel(v)
    return BinaryLabel.from_int(int(v))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    f1: float | None
    auc: float | None
    aupr: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    threshold: float = 0.5
    undefined: tuple[str, ...] = field(default_factory=tuple)

    def as_table_row(self) -> dict:
        return {
            "ACC": self.accuracy,
            "SENS": self.sensitivity,
            "SPEC": self.specificity,
            "F1": self.f1,
            "AUC": self.auc,
            "AUPR": self.aupr,
        }


def _ratio(num, den):
    return None if den == 0 else num / den


def binary_metrics(preds: PredictionSet, threshold: float = 0.5, use_votes: bool = True) -> MetricsReport:
    """Confusion-matrix metrics; AUC/AUPR are left empty (see :func:`full_report`)."""
    if len(preds) == 0:
        raise ValidationError("cannot compute metrics on an empty prediction set")
    y = preds.labels
    yhat = preds.votes(threshold) if use_votes else (preds.probabilities >= threshold).astype(np.int64)
    tp = int(np.sum((yhat == 1) & (y == 1)))
    fp = int(np.sum((yhat == 1) & (y == 0)))
    tn = int(np.sum((yhat == 0) & (y == 0)))
    fn = int(np.sum((yhat == 0) & (y == 1)))
    n = len(y)
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    values = {"SENS": sens, "SPEC": spec, "F1": f1}
    return MetricsReport(
        accuracy=(tp + tn) / n,
        sensitivity=sens,
        specificity=spec,
        f1=f1,
        auc=None,
        aupr=None,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n=n,
        threshold=threshold,
        undefined=tuple(k for k, v in values.items() if v is None),
    )


def _scores_labels(preds) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(preds, PredictionSet):
        return preds.probabilities, preds.labels
    scores, labels = preds
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _threshold_counts(scores, labels):
    """Cumulative TP/FP when predicting positive for score >= each distinct threshold (descending)."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(1 - y)[last]
    return s[last], tps, fps


def roc_auc(preds) -> tuple[np.ndarray, float]:
    """ROC curve points (threshold, FPR, TPR) and trapezoidal AUC.

    Tied scores share one threshold, so the trapezoid gives ties half
    credit and the area equals the Mann-Whitney statistic.
    """
    scores, labels = _scores_labels(preds)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one sample of each class")
    thr, tps, fps = _threshold_counts(scores, labels)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thr = np.r_[np.inf, thr]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return np.column_stack([thr, fpr, tpr]), auc


def pr_aupr(preds) -> tuple[np.ndarray, float]:
    """PR curve points (threshold, recall, precision) and step-wise AUPR.

    AUPR = sum over thresholds of (R_k - R_{k-1}) * P_k, i.e. precision is
    held at its value at the right end of every recall step. The curve
    starts at (recall 0, precision 1).
    """
    scores, labels = _scores_labels(preds)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive sample")
    thr, tps, fps = _threshold_counts(scores, labels)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    aupr = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    points = np.column_stack([np.r_[np.inf, thr], np.r_[0.0, recall], np.r_[1.0, precision]])
    return points, aupr


def full_report(preds: PredictionSet, threshold: float = 0.5) -> MetricsReport:
    """Threshold metrics plus AUC and AUPR (undefined where a class is missing)."""
    base = binary_metrics(preds, threshold)
    undefined = list(base.undefined)
    try:
        _, auc = roc_auc(preds)
    except UndefinedMetricError:
        auc = None
        undefined.append("AUC")
    try:
        _, aupr = pr_aupr(preds)
    except UndefinedMetricError:
        aupr = None
        undefined.append("AUPR")
    return MetricsReport(
        accuracy=base.accuracy,
        sensitivity=base.sensitivity,
        specificity=base.specificity,
        f1=base.f1,
        auc=auc,
        aupr=aupr,
        tp=base.tp,
        fp=base.fp,
        tn=base.tn,
        fn=base.fn,
        n=base.n,
        threshold=threshold,
        undefined=tuple(undefined),
    )


def pool_fold_predictions(per_fold: Sequence[PredictionSet]) -> PredictionSet:
    entries = []
    seen: dict[str, object] = {}
    for ps in per_fold:
        for e in ps.entries:
            if e.map_id in seen:
                raise ValidationError(
                    f"map_id {e.map_id!r} tested in fold {seen[e.map_id]} and fold {e.fold_id}"
                )
            seen[e.map_id] = e.fold_id
            entries.append(e)
    return PredictionSet(tuple(entries))


def cohens_kappa(ratings_a: Sequence, ratings_b: Sequence) -> float:
    a = list(ratings_a)
    b = list(ratings_b)
    if len(a) != len(b) or not a:
        raise ValidationError("ratings must be non-empty and of equal length")
    n = len(a)
    cats = sorted(set(a) | set(b), key=str)
    p_o = sum(x == y for x, y in zip(a, b)) / n
    p_e = sum((a.count(c) / n) * (b.count(c) / n) for c in cats)
    if math.isclose(p_e, 1.0):
        raise UndefinedMetricError("kappa undefined: both raters used one identical category")
    return (p_o - p_e) / (1.0 - p_e)


# -- file formats -----------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_predictions(preds: PredictionSet, path, threshold: float = 0.5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    votes = preds.votes(threshold)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for e, v in zip(preds.entries, votes):
            w.writerow([e.map_id, e.subject_id, e.fold_id, _fmt(e.probability), BinaryLabel.from_int(v).value, e.true_label.value])
    return path


def read_predictions(path) -> PredictionSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"predictions file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
            raise ValidationError(f"{path}: header must be {','.join(PREDICTION_COLUMNS)}")
        rows = list(reader)
    entries = []
    for r in rows:
        fold = r["fold_id"]
        entries.append(
            Prediction(
                r["map_id"],
                r["subject_id"],
                int(fold) if fold.lstrip("-").isdigit() else fold,
                float(r["probability"]),
                BinaryLabel(r["true_label"]),
                BinaryLabel(r["vote"]) if r["vote"] else None,
            )
        )
    return PredictionSet(tuple(entries))


def write_curve(points: np.ndarray, path, x_name: str, y_name: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", x_name, y_name])
        for t, x, y in points:
            w.writerow([_fmt(t), _fmt(x), _fmt(y)])
    return path


def report_dict(report: MetricsReport, **context) -> dict:
    out = {}
    for k, v in report.as_table_row().items():
        out[k] = UNDEFINED if v is None else round(float(v), 12)
    out.update(
        {"TP": report.tp, "FP": report.fp, "TN": report.tn, "FN": report.fn, "N": report.n,
         "threshold": report.threshold, "undefined": list(report.undefined)}
    )
    out.update(context)
    return out


def write_metrics_report(report: MetricsReport, path, **context) -> Path:
    """JSON keyed by metric name; ``context`` adds e.g. seed and model name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_dict(report, **context), indent=2, sort_keys=False) + "\n")
    return path


def read_metrics_report(path) -> dict:
    return json.loads(Path(path).read_text())

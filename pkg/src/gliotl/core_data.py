"""Label taxonomy, reader consolidation and cohort manifests.

A manifest is the unit every other module consumes: an ordered list of
difference-map records plus a subject index. Manifests are frozen once
built so they can be shared freely between folds and workers.
"""

from __future__ import annotations

import csv
import enum
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError

MANIFEST_COLUMNS = (
    "map_id",
    "subject_id",
    "previous_scan_id",
    "current_scan_id",
    "label",
    "provenance",
    "confidence",
    "volume_path",
)


class ConclusionLabel(str, enum.Enum):
    STABLE = "stable"
    PROGRESSION = "progression"
    RESPONSE = "response"
    UNKNOWN = "unknown"


class BinaryLabel(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"

    @property
    def positive(self) -> bool:
        return self is BinaryLabel.UNSTABLE

    @classmethod
    def from_int(cls, value: int) -> "BinaryLabel":
        return cls.UNSTABLE if int(value) == 1 else cls.STABLE

    def __int__(self) -> int:
        return int(self.positive)


class CohortName(str, enum.Enum):
    HAD = "HAD"
    WAD = "WAD"
    EXTERNAL = "EXTERNAL"


def merge_conclusion(label: ConclusionLabel) -> BinaryLabel:
    """Collapse progression/response into ``unstable``."""
    label = ConclusionLabel(label)
    if label is ConclusionLabel.UNKNOWN:
        raise ValidationError("'unknown' has no binary counterpart")
    if label is ConclusionLabel.STABLE:
        return BinaryLabel.STABLE
    return BinaryLabel.UNSTABLE


@dataclass(frozen=True)
class ReportAnnotation:
    report_id: str
    subject_id: str
    reader_id: str
    global_conclusion: ConclusionLabel
    t1w_conclusion: ConclusionLabel
    t2w_conclusion: ConclusionLabel

    def __post_init__(self):
        for name in ("global_conclusion", "t1w_conclusion", "t2w_conclusion"):
            object.__setattr__(self, name, ConclusionLabel(getattr(self, name)))


@dataclass(frozen=True)
class LabelProvenance:
    kind: str  # "human" | "weak"
    confidence: float | None = None

    def __post_init__(self):
        if self.kind not in ("human", "weak"):
            raise ValidationError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "human":
            if self.confidence is not None:
                raise ValidationError("human provenance carries no confidence")
        else:
            if self.confidence is None:
                raise ValidationError("weak provenance requires a confidence")
            c = float(self.confidence)
            if not 0.0 <= c <= 1.0:
                raise ValidationError(f"confidence {c} outside [0, 1]")
            object.__setattr__(self, "confidence", c)

    @classmethod
    def human(cls) -> "LabelProvenance":
        return cls("human")

    @classmethod
    def weak(cls, confidence: float) -> "LabelProvenance":
        return cls("weak", confidence)


@dataclass(frozen=True)
class DifferenceMapRecord:
    map_id: str
    subject_id: str
    previous_scan_id: str
    current_scan_id: str
    label: BinaryLabel
    provenance: LabelProvenance
    volume_path: str

    def __post_init__(self):
        object.__setattr__(self, "label", BinaryLabel(self.label))
        if self.previous_scan_id == self.current_scan_id:
            raise ValidationError(
                f"record {self.map_id}: previous and current scan are both {self.current_scan_id!r}"
            )


@dataclass(frozen=True)
class CohortManifest:
    name: CohortName
    records: tuple[DifferenceMapRecord, ...] = ()
    subject_index: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "name", CohortName(self.name))
        object.__setattr__(self, "records", tuple(self.records))
        index = _index_subjects(self.records)
        if self.subject_index and dict(self.subject_index) != index:
            raise ValidationError("subject_index does not match record subjects")
        object.__setattr__(self, "subject_index", MappingProxyType(index))
        seen = set()
        for rec in self.records:
            if rec.map_id in seen:
                raise ValidationError(f"duplicate map_id {rec.map_id!r}")
            seen.add(rec.map_id)
        expected = {CohortName.HAD: "human", CohortName.WAD: "weak"}.get(self.name)
        if expected:
            bad = [r.map_id for r in self.records if r.provenance.kind != expected]
            if bad:
                raise ValidationError(
                    f"{self.name.value} manifest requires {expected} provenance; offending: {bad[:5]}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def subjects(self) -> list[str]:
        return list(self.subject_index)

    def by_map_id(self) -> dict[str, DifferenceMapRecord]:
        return {r.map_id: r for r in self.records}

    def subset(self, keep) -> "CohortManifest":
        """Records for which ``keep(record)`` is true, order preserved."""
        return CohortManifest(self.name, tuple(r for r in self.records if keep(r)))

    def for_subjects(self, subjects: Iterable[str]) -> "CohortManifest":
        wanted = set(subjects)
        return self.subset(lambda r: r.subject_id in wanted)

    def label_counts(self) -> dict[str, int]:
        counts = {b.value: 0 for b in BinaryLabel}
        for r in self.records:
            counts[r.label.value] += 1
        return counts


def _index_subjects(records: Sequence[DifferenceMapRecord]) -> dict[str, tuple[str, ...]]:
    index: dict[str, list[str]] = OrderedDict()
    for rec in records:
        index.setdefault(rec.subject_id, []).append(rec.map_id)
    return {k: tuple(v) for k, v in index.items()}


# -- consolidation ----------------------------------------------------------


def consolidate_labels(annotations: Sequence[ReportAnnotation]) -> BinaryLabel | None:
    """Turn one or two reader annotations of a report into a binary label.

    Returns ``None`` when the report must be discarded: readers disagree on
    the T2w conclusion, T2w differs from the global conclusion, or T2w is
    unknown.
    """
    annotations = list(annotations)
    if not 1 <= len(annotations) <= 2:
        raise ValidationError(f"expected 1 or 2 annotations, got {len(annotations)}")
    if len({a.report_id for a in annotations}) != 1:
        raise ValidationError("annotations refer to different reports")
    if len(annotations) == 2 and annotations[0].reader_id == annotations[1].reader_id:
        raise ValidationError(f"reader {annotations[0].reader_id!r} annotated the report twice")

    t2w = {a.t2w_conclusion for a in annotations}
    if len(t2w) != 1:
        return None
    (conclusion,) = t2w
    if conclusion is ConclusionLabel.UNKNOWN:
        return None
    if any(a.global_conclusion is not conclusion for a in annotations):
        return None
    return merge_conclusion(conclusion)


def consolidate_corpus(annotations: Iterable[ReportAnnotation]) -> dict[str, BinaryLabel | None]:
    """Group annotations by report and consolidate each group.

    Raises if a (report_id, reader_id) pair appears more than once.
    """
    groups: dict[str, list[ReportAnnotation]] = OrderedDict()
    seen = set()
    for ann in annotations:
        key = (ann.report_id, ann.reader_id)
        if key in seen:
            raise ValidationError(f"duplicate annotation for report/reader {key}")
        seen.add(key)
        groups.setdefault(ann.report_id, []).append(ann)
    return {rid: consolidate_labels(group) for rid, group in groups.items()}


# -- weak labels ------------------------------------------------------------


def threshold_weak_labels(
    soft_labels: Iterable[tuple[DifferenceMapRecord, BinaryLabel, float]],
    cutoff: float,
) -> CohortManifest:
    """Keep weakly-labelled records whose confidence is strictly above ``cutoff``.

    ``soft_labels`` holds (record, predicted label, confidence) triples where
    the confidence is the probability of the predicted *binary* label.
    """
    if not 0.5 < cutoff < 1.0:
        raise ValidationError(f"cutoff must lie in (0.5, 1.0), got {cutoff}")
    kept = []
    for record, label, confidence in soft_labels:
        confidence = float(confidence)
        if not 0.0 <= confidence <= 1.0:
            raise ValidationError(f"record {record.map_id}: confidence {confidence} outside [0, 1]")
        if confidence > cutoff:
            kept.append(
                replace(record, label=BinaryLabel(label), provenance=LabelProvenance.weak(confidence))
            )
    return CohortManifest(CohortName.WAD, tuple(kept))


def threshold_manifest(wad: CohortManifest, cutoff: float) -> CohortManifest:
    """Same as :func:`threshold_weak_labels` for an already-weak manifest."""
    return threshold_weak_labels(((r, r.label, r.provenance.confidence) for r in wad), cutoff)


# -- manifest IO ------------------------------------------------------------


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


def build_manifest(
    rows: Iterable[Mapping[str, str]],
    cohort_name: str | CohortName,
    base_dir: str | os.PathLike | None = None,
    check_files: bool = True,
) -> CohortManifest:
    """Build a manifest from table rows (dicts keyed by MANIFEST_COLUMNS).

    Relative ``volume_path`` entries are resolved against ``base_dir``.
    """
    base = Path(base_dir) if base_dir is not None else None
    records = []
    for i, row in enumerate(rows):
        missing = [c for c in MANIFEST_COLUMNS if c not in row]
        if missing:
            raise ValidationError(f"row {i}: missing columns {missing}")
        path = _resolve(row["volume_path"], base)
        if check_files and not path.exists():
            raise FileNotFoundError(f"volume file not found: {path}")
        conf = row["confidence"]
        if row["provenance"] == "human":
            if conf not in ("", None):
                raise ValidationError(f"row {i}: human provenance must have empty confidence")
            prov = LabelProvenance.human()
        else:
            try:
                prov = LabelProvenance(row["provenance"], float(conf))
            except (TypeError, ValueError):
                raise ValidationError(f"row {i}: bad confidence {conf!r}") from None
        try:
            label = BinaryLabel(row["label"])
        except ValueError:
            raise ValidationError(f"row {i}: bad label {row['label']!r}") from None
        records.append(
            DifferenceMapRecord(
                map_id=str(row["map_id"]),
                subject_id=str(row["subject_id"]),
                previous_scan_id=str(row["previous_scan_id"]),
                current_scan_id=str(row["current_scan_id"]),
                label=label,
                provenance=prov,
                volume_path=str(path),
            )
        )
    return CohortManifest(CohortName(cohort_name), tuple(records))


def read_manifest(
    path: str | os.PathLike, cohort_name: str | CohortName, check_files: bool = True
) -> CohortManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValidationError(
                f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}"
            )
        rows = list(reader)
    return build_manifest(rows, cohort_name, base_dir=path.parent, check_files=check_files)


def write_manifest(
    manifest: CohortManifest, path: str | os.PathLike, relative_to: str | os.PathLike | None = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            # paths are stored relative to the manifest so a run directory can be moved
            vp = Path(os.path.relpath(Path(r.volume_path).resolve(), base.resolve()))
            conf = "" if r.provenance.confidence is None else repr(r.provenance.confidence)
            writer.writerow(
                [
                    r.map_id,
                    r.subject_id,
                    r.previous_scan_id,
                    r.current_scan_id,
                    r.label.value,
                    r.provenance.kind,
                    conf,
                    vp.as_posix(),
                ]
            )
    return path

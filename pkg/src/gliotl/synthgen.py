"""Deterministic synthetic longitudinal cohorts.

Each subject is a noisy volume with one hyperintense spherical lesion whose
radius is constant (stable), increases (growing) or decreases (shrinking)
between timepoints. Difference maps are built with the bypass pipeline, so
every record here has the same provenance story as a clinical one.

Weak labels: every WAD record gets a margin ``m ~ Beta(2, 1)``, a
confidence ``0.5 + 0.5 m`` and a flip probability ``min(1, c (1 - m))``
where ``c`` is solved in closed form so the expected flip rate equals
``weak_noise_rate``. Low-confidence records are therefore flipped more often.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_data import (
    BinaryLabel,
    CohortManifest,
    CohortName,
    DifferenceMapRecord,
    LabelProvenance,
)
from .errors import ValidationError
from .preprocess import Volume3D, make_difference_map, save_volume
from .seeding import derive_seed


class Evolution(str, enum.Enum):
    STABLE = "stable"
    GROWING = "growing"
    SHRINKING = "shrinking"


@dataclass(frozen=True)
class SynthSubjectSpec:
    subject_id: str
    n_timepoints: int
    lesion_center: tuple[float, float, float]
    lesion_radius: float
    evolution: Evolution
    noise_sigma: float
    seed: int
    shape: tuple[int, int, int] = (32, 32, 32)
    radius_step: float = 2.0
    lesion_amplitude: float = 1.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "evolution", Evolution(self.evolution))
        if self.n_timepoints < 2:
            raise ValidationError("a longitudinal subject needs at least 2 timepoints")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.evolution is not Evolution.STABLE and self.radius_step <= 0:
            raise ValidationError("changing lesions need radius_step > 0")

    def radii(self) -> list[float]:
        sign = {Evolution.STABLE: 0.0, Evolution.GROWING: 1.0, Evolution.SHRINKING: -1.0}[self.evolution]
        return [self.lesion_radius + sign * self.radius_step * t for t in range(self.n_timepoints)]


def _soft_sphere(shape, center, radius, width=0.25):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    # sigmoid edge, ~1 voxel from 12% to 88%
    return 0.5 * (1.0 - np.tanh((dist - radius) / (2.0 * width)))


def generate_longitudinal_subject(spec: SynthSubjectSpec):
    """Return ``(volumes, pair_labels)`` for one synthetic subject."""
    radii = spec.radii()
    if min(radii) <= 0:
        raise ValidationError(f"{spec.subject_id}: lesion radius shrinks to {min(radii)}")
    reach = max(radii) + 1.0
    for c, n in zip(spec.lesion_center, spec.shape):
        if c - reach < 0 or c + reach > n - 1:
            raise ValidationError(
                f"{spec.subject_id}: lesion (center {spec.lesion_center}, radius up to {max(radii)}) "
                f"leaves the {spec.shape} volume"
            )
    rng = np.random.default_rng(spec.seed)
    volumes = []
    for r in radii:
        vox = spec.lesion_amplitude * _soft_sphere(spec.shape, spec.lesion_center, r)
        if spec.noise_sigma > 0:
            vox = vox + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
        volumes.append(Volume3D(vox, spec.spacing))
    label = BinaryLabel.STABLE if spec.evolution is Evolution.STABLE else BinaryLabel.UNSTABLE
    return volumes, [label] * (spec.n_timepoints - 1)


@dataclass(frozen=True)
class SynthCohortSpec:
    n_subjects: int
    change_prevalence: float = 0.5
    weak_noise_rate: float = 0.07
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    n_wad_subjects: int | None = None
    n_timepoints: int = 3
    noise_sigma: float = 0.1
    radius_range: tuple[float, float] = (3.0, 6.0)
    radius_step: float = 2.0
    overlap_subjects: int = 0
    n_external_subjects: int = 0
    volume_format: str = ".nii.gz"

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        if self.n_subjects < 0:
            raise ValidationError("n_subjects must be >= 0")
        for name in ("change_prevalence", "weak_noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.overlap_subjects > self.n_subjects:
            raise ValidationError("overlap_subjects cannot exceed n_subjects")
        if self.volume_format not in (".nii.gz", ".nii", ".raw"):
            raise ValidationError(f"unsupported volume_format {self.volume_format}")

    @property
    def wad_subjects(self) -> int:
        return self.n_subjects if self.n_wad_subjects is None else self.n_wad_subjects


@dataclass(frozen=True)
class SynthCohort:
    had: CohortManifest
    wad: CohortManifest
    wad_truth: dict[str, BinaryLabel] = field(default_factory=dict)
    external: CohortManifest | None = None

    def __iter__(self):
        # unpacks as (had, wad)
        return iter((self.had, self.wad))


def flip_scale(rate: float) -> float:
    """Slope ``c`` such that E[min(1, c(1-m))] = rate for m ~ Beta(2, 1)."""
    if rate <= 0:
        return 0.0
    if rate <= 1.0 / 3.0:
        return 3.0 * rate
    if rate >= 1.0:
        return math.inf
    t = 1.5 * (1.0 - math.sqrt(1.0 - 4.0 * (1.0 - rate) / 3.0))
    return 1.0 / t


def flip_probability(margin, rate: float):
    c = flip_scale(rate)
    margin = np.asarray(margin, dtype=float)
    if math.isinf(c):
        return np.ones_like(margin)
    return np.minimum(1.0, c * (1.0 - margin))


def _subject_spec(rng, subject_id, spec: SynthCohortSpec, unstable: bool, seed: int) -> SynthSubjectSpec:
    lo, hi = spec.radius_range
    r0 = float(rng.uniform(lo, hi))
    if unstable:
        evo = Evolution.GROWING if rng.random() < 0.5 else Evolution.SHRINKING
    else:
        evo = Evolution.STABLE
    steps = spec.n_timepoints - 1
    if evo is Evolution.SHRINKING:
        r0 = max(r0, spec.radius_step * steps + 1.0)
    r_max = r0 + (spec.radius_step * steps if evo is Evolution.GROWING else 0.0)
    reach = r_max + 1.0
    center = []
    for n in spec.volume_shape:
        if 2 * reach > n - 1:
            raise ValidationError(f"volume {spec.volume_shape} too small for lesion radius {r_max}")
        center.append(float(rng.uniform(reach, n - 1 - reach)))
    return SynthSubjectSpec(
        subject_id=subject_id,
        n_timepoints=spec.n_timepoints,
        lesion_center=tuple(center),
        lesion_radius=r0,
        evolution=evo,
        noise_sigma=spec.noise_sigma,
        seed=seed,
        shape=spec.volume_shape,
        radius_step=spec.radius_step,
    )


def _emit_subject(sub: SynthSubjectSpec, out_dir: Path | None, fmt: str, prefix: str):
    volumes, labels = generate_longitudinal_subject(sub)
    maps = []
    for t, label in enumerate(labels):
        diff, _ = make_difference_map(volumes[t], volumes[t + 1])
        map_id = f"{prefix}{sub.subject_id}_t{t}"
        if out_dir is not None:
            path = save_volume(diff.with_voxels(diff.voxels.astype(np.float32)), out_dir / f"{map_id}{fmt}")
        else:
            path = Path(f"{map_id}{fmt}")
        maps.append((map_id, f"{sub.subject_id}_s{t}", f"{sub.subject_id}_s{t + 1}", label, str(path)))
    return maps


def generate_cohort(spec: SynthCohortSpec, out_dir: str | os.PathLike | None = None) -> SynthCohort:
    """Generate HAD/WAD (and optional external) manifests with volumes on disk.

    With ``out_dir=None`` nothing is written and records point at
    placeholder paths; useful for label-only checks.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
    vol_dir = out / "volumes" if out is not None else None
    rng = np.random.default_rng(derive_seed(spec.seed, "cohort"))

    def subjects(prefix: str, n: int):
        unstable = rng.random(n) < spec.change_prevalence
        out_specs = []
        for i in range(n):
            sid = f"{prefix}{i:04d}"
            sub_rng = np.random.default_rng(derive_seed(spec.seed, "subject", sid))
            out_specs.append(_subject_spec(sub_rng, sid, spec, bool(unstable[i]), derive_seed(spec.seed, "noise", sid)))
        return out_specs

    had_specs = subjects("H", spec.n_subjects)
    wad_specs = subjects("W", spec.wad_subjects)

    had_records = []
    for sub in had_specs:
        for map_id, prev, cur, label, path in _emit_subject(sub, vol_dir, spec.volume_format, "had_"):
            had_records.append(
                DifferenceMapRecord(map_id, sub.subject_id, prev, cur, label, LabelProvenance.human(), path)
            )

    # overlapping subjects contribute extra (weakly labelled) maps of HAD patients
    overlap = []
    for sub in had_specs[: spec.overlap_subjects]:
        extra = SynthSubjectSpec(
            subject_id=sub.subject_id,
            n_timepoints=sub.n_timepoints,
            lesion_center=sub.lesion_center,
            lesion_radius=sub.lesion_radius,
            evolution=sub.evolution,
            noise_sigma=sub.noise_sigma,
            seed=derive_seed(spec.seed, "overlap", sub.subject_id),
            shape=sub.shape,
            radius_step=sub.radius_step,
        )
        overlap.append(extra)

    wad_rng = np.random.default_rng(derive_seed(spec.seed, "weak-labels"))
    wad_records, truth = [], {}
    for sub in wad_specs + overlap:
        for map_id, prev, cur, label, path in _emit_subject(sub, vol_dir, spec.volume_format, "wad_"):
            margin = float(wad_rng.beta(2.0, 1.0))
            confidence = 0.5 + 0.5 * margin
            flipped = bool(wad_rng.random() < flip_probability(margin, spec.weak_noise_rate))
            weak = label
            if flipped:
                weak = BinaryLabel.STABLE if label is BinaryLabel.UNSTABLE else BinaryLabel.UNSTABLE
            truth[map_id] = label
            wad_records.append(
                DifferenceMapRecord(
                    map_id, sub.subject_id, prev, cur, weak, LabelProvenance.weak(confidence), path
                )
            )

    external = None
    if spec.n_external_subjects:
        ext_records = []
        for sub in subjects("E", spec.n_external_subjects):
            for map_id, prev, cur, label, path in _emit_subject(sub, vol_dir, spec.volume_format, "ext_"):
                ext_records.append(
                    DifferenceMapRecord(map_id, sub.subject_id, prev, cur, label, LabelProvenance.human(), path)
                )
        external = CohortManifest(CohortName.EXTERNAL, tuple(ext_records))

    return SynthCohort(
        had=CohortManifest(CohortName.HAD, tuple(had_records)),
        wad=CohortManifest(CohortName.WAD, tuple(wad_records)),
        wad_truth=truth,
        external=external,
    )


def flip_rate(wad: CohortManifest, truth: dict[str, BinaryLabel], min_confidence: float | None = None) -> float:
    """Fraction of WAD labels disagreeing with ground truth (optionally above a confidence)."""
    recs = [
        r for r in wad if min_confidence is None or r.provenance.confidence > min_confidence
    ]
    if not recs:
        return float("nan")
    return sum(r.label is not truth[r.map_id] for r in recs) / len(recs)


def lesion_shell_mask(spec: SynthSubjectSpec, inner: float, outer: float) -> np.ndarray:
    """Boolean mask of voxels with inner <= distance-to-center < outer."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.shape], indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, spec.lesion_center)))
    return (dist >= inner) & (dist < outer)


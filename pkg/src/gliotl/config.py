"""Experiment configuration: one YAML document per run plus ``--set`` overrides.

Everything is validated up front (pydantic for structure, then the owning
module's own constructors) so a bad value fails before any work starts.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ValidationError
from .hpo import Budget, MedianPruner, SearchSpace
from .models import ArchitectureSpec
from .synthgen import SynthCohortSpec
from .training import AugmentationPolicy, LEARNING_RATES, WEIGHT_DECAYS, TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    had_manifest: Optional[Path] = None
    wad_manifest: Optional[Path] = None
    external_manifest: Optional[Path] = None
    volume_format: Literal[".nii", ".nii.gz", ".raw"] = ".nii.gz"
    input_grid: tuple[int, int, int] = (96, 96, 64)
    check_files: bool = True


class SynthSection(_Section):
    n_subjects: int = 60
    n_wad_subjects: Optional[int] = None
    n_external_subjects: int = 0
    overlap_subjects: int = 0
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    change_prevalence: float = 0.5
    weak_noise_rate: float = 0.07
    noise_sigma: float = 0.1
    n_timepoints: int = 3
    radius_range: tuple[float, float] = (3.0, 6.0)
    radius_step: float = 2.0


class PreprocessSection(_Section):
    pairs: Optional[Path] = None
    cohort: Literal["HAD", "WAD", "EXTERNAL"] = "HAD"
    bias_correction: Optional[str] = None
    registration: Optional[str] = None
    skull_strip: Optional[str] = None
    timeout: float = 3600.0
    use_brain_mask: bool = False


class ModelSection(_Section):
    family: Literal["vgg3d", "seresnext3d"] = "vgg3d"
    conv_block_channels: Optional[tuple[int, ...]] = None
    fc_widths: Optional[tuple[int, ...]] = None
    convs_per_block: Optional[int] = None
    cardinality: Optional[int] = None
    se_reduction: Optional[int] = None
    stage_depths: Optional[tuple[int, ...]] = None
    stage_planes: Optional[tuple[int, ...]] = None
    base_width: Optional[int] = None
    stem_channels: Optional[int] = None
    dropout: Optional[float] = None


class AugmentSection(_Section):
    enabled: bool = True
    flip_prob: float = 0.2
    gaussian_noise_prob: float = 0.2
    noise_sigma: float = 0.1
    zoom_prob: float = 0.2
    zoom_range: tuple[float, float] = (0.7, 1.3)
    elastic_prob: float = 0.2
    elastic_sigma: float = 4.0
    elastic_magnitude: float = 2.0


class TrainSection(_Section):
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = Field(4, ge=1)
    max_epochs: int = Field(60, ge=1)
    early_stop_patience: int = Field(10, ge=1)
    allow_off_grid: bool = False
    strategy: Literal["none", "mixed_training", "fine_tuning", "feature_extraction"] = "none"
    fraction_of_wad: float = 0.95
    pretrain_val_fraction: float = Field(0.1, gt=0, lt=1)
    fold: int = Field(0, ge=0)
    augmentation: AugmentSection = Field(default_factory=AugmentSection)


class PrunerSection(_Section):
    enabled: bool = True
    min_trials: int = Field(5, ge=1)
    warmup_steps: int = Field(5, ge=0)


class HPOSection(_Section):
    kind: Literal["baseline", "tl"] = "baseline"
    sampler: Literal["grid", "random", "tpe"] = "grid"
    n_trials: Optional[int] = None
    seconds: Optional[float] = None
    n_startup: int = Field(10, ge=0)
    learning_rates: tuple[float, ...] = LEARNING_RATES
    weight_decays: tuple[float, ...] = WEIGHT_DECAYS
    mixed_training: tuple[bool, ...] = (True, False)
    feature_extraction: tuple[bool, ...] = (True, False)
    fractions_of_wad: tuple[float, ...] = (0.75, 0.95)
    pruner: PrunerSection = Field(default_factory=PrunerSection)


class CVSection(_Section):
    k: int = Field(5, ge=2)
    val_fraction: float = Field(0.25, gt=0, lt=1)
    stratify: bool = True
    seed: Optional[int] = None


class StatsSection(_Section):
    n_permutations: int = Field(10_000, ge=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    predictions_a: Optional[Path] = None
    predictions_b: Optional[Path] = None
    name_a: str = "model_a"
    name_b: str = "model_b"


class EvaluateSection(_Section):
    predictions: Optional[Path] = None
    threshold: float = Field(0.5, gt=0, lt=1)


class InferSection(_Section):
    checkpoints: list[Path] = Field(default_factory=list)
    study_dir: Optional[Path] = None


class OutputSection(_Section):
    directory: Path = Path("runs/default")


class ExperimentConfig(_Section):
    name: str = "experiment"
    seed: int = 0
    parallelism: int = Field(1, ge=1)
    data: DataSection = Field(default_factory=DataSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    preprocess: PreprocessSection = Field(default_factory=PreprocessSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    hpo: HPOSection = Field(default_factory=HPOSection)
    cv: CVSection = Field(default_factory=CVSection)
    stats: StatsSection = Field(default_factory=StatsSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)
    infer: InferSection = Field(default_factory=InferSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, v):
        if v < 0:
            raise ValueError("seed must be non-negative")
        return v

    @model_validator(mode="after")
    def _module_checks(self):
        # delegate to the owning modules; their errors carry the field name
        checks = (
            ("model", self.architecture),
            ("train", self.train_config),
            ("train.augmentation", self.policy),
            ("hpo", self.search_space),
            ("hpo", self.budget),
            ("synth", self.synth_spec),
        )
        for where, fn in checks:
            try:
                fn()
            except (ValidationError, ValueError, TypeError) as exc:
                raise ValueError(f"{where}: {exc}") from None
        return self

    # -- conversions into module objects --------------------------------

    def architecture(self) -> ArchitectureSpec:
        overrides = {k: v for k, v in self.model.model_dump().items() if k != "family" and v is not None}
        base = ArchitectureSpec.vgg3d if self.model.family == "vgg3d" else ArchitectureSpec.seresnext3d
        return base(input_shape=tuple(self.data.input_grid), **overrides)

    def train_config(self, **kw) -> TrainConfig:
        t = self.train
        args = dict(
            learning_rate=t.learning_rate,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            early_stop_patience=t.early_stop_patience,
            seed=self.seed,
            allow_off_grid=t.allow_off_grid,
        )
        args.update(kw)
        return TrainConfig(**args)

    def policy(self) -> AugmentationPolicy:
        a = self.train.augmentation
        if not a.enabled:
            return AugmentationPolicy.off()
        return AugmentationPolicy(**{k: v for k, v in a.model_dump().items() if k != "enabled"})

    def search_space(self) -> SearchSpace:
        h = self.hpo
        return SearchSpace(
            learning_rates=tuple(h.learning_rates),
            weight_decays=tuple(h.weight_decays),
            tl_active=h.kind == "tl",
            mixed_training=tuple(h.mixed_training),
            feature_extraction=tuple(h.feature_extraction),
            fractions_of_wad=tuple(h.fractions_of_wad),
        )

    def budget(self) -> Budget:
        return Budget(self.hpo.n_trials, self.hpo.seconds)

    def pruner(self) -> MedianPruner | None:
        p = self.hpo.pruner
        return MedianPruner(p.min_trials, p.warmup_steps) if p.enabled else None

    def synth_spec(self) -> SynthCohortSpec:
        s = self.synth
        return SynthCohortSpec(
            n_subjects=s.n_subjects,
            change_prevalence=s.change_prevalence,
            weak_noise_rate=s.weak_noise_rate,
            volume_shape=tuple(s.volume_shape),
            seed=self.seed,
            n_wad_subjects=s.n_wad_subjects,
            n_timepoints=s.n_timepoints,
            noise_sigma=s.noise_sigma,
            radius_range=tuple(s.radius_range),
            radius_step=s.radius_step,
            overlap_subjects=s.overlap_subjects,
            n_external_subjects=s.n_external_subjects,
            volume_format=self.data.volume_format,
        )

    @property
    def cv_seed(self) -> int:
        return self.seed if self.cv.seed is None else self.cv.seed


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ValidationError(f"override {item!r} has an empty key")
    return path, yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(doc: dict, overrides) -> dict:
    doc = dict(doc)
    for item in overrides or ():
        path, value = parse_override(item)
        node = doc
        for p in path[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        node[path[-1]] = value
    return doc


def load_config(path=None, overrides=(), **top_level) -> ExperimentConfig:
    """Read YAML (optional), apply ``key.path=value`` overrides and validate.

    Relative paths in the ``data``, ``preprocess``, ``stats``, ``evaluate``
    and ``infer`` sections are resolved against the config file's directory.
    Raises ``FileNotFoundError`` for a missing config and
    ``pydantic.ValidationError`` for invalid content.
    """
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        base = path.parent
    doc = apply_overrides(doc, overrides)
    for k, v in top_level.items():
        if v is not None:
            if k == "output":
                doc.setdefault("output", {})
                doc["output"] = {**doc["output"], "directory": v}
            else:
                doc[k] = v
    cfg = ExperimentConfig.model_validate(doc)
    return _resolve_paths(cfg, base)


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    def fix(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    for section, fields in (
        ("data", ("had_manifest", "wad_manifest", "external_manifest")),
        ("preprocess", ("pairs",)),
        ("stats", ("predictions_a", "predictions_b")),
        ("evaluate", ("predictions",)),
        ("infer", ("study_dir",)),
    ):
        sec = getattr(cfg, section)
        for f in fields:
            setattr(sec, f, fix(getattr(sec, f)))
    cfg.infer.checkpoints = [fix(p) for p in cfg.infer.checkpoints]
    return cfg


def config_snapshot(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")

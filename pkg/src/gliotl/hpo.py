"""Conditional hyperparameter space, samplers, median pruner and study loop.

The transfer-learning space is a small tree::

    learning_rate x weight_decay x
        mixed_training = True  -> fraction_of_wad
        mixed_training = False -> feature_extraction -> fraction_of_wad

``feature_extraction`` only exists on the ``mixed_training = False`` branch.
Grid order is lexicographic over the declared choice lists in the order
learning_rate, weight_decay, mixed_training, feature_extraction,
fraction_of_wad (first declared choice first).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import statistics
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import GridExhausted, TrialPruned, ValidationError
from .seeding import derive_seed, rng_for
from .training import LEARNING_RATES, WEIGHT_DECAYS, TLStrategy

log = logging.getLogger(__name__)

BRANCH_ORDER = ("mixed_training", "feature_extraction", "fraction_of_wad")
PARAM_ORDER = ("learning_rate", "weight_decay") + BRANCH_ORDER


@dataclass(frozen=True)
class SearchSpace:
    learning_rates: tuple[float, ...] = LEARNING_RATES
    weight_decays: tuple[float, ...] = WEIGHT_DECAYS
    tl_active: bool = False
    mixed_training: tuple[bool, ...] = (True, False)
    feature_extraction: tuple[bool, ...] = (True, False)
    fractions_of_wad: tuple[float, ...] = (0.75, 0.95)

    def __post_init__(self):
        for name in ("learning_rates", "weight_decays", "mixed_training", "feature_extraction", "fractions_of_wad"):
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ValidationError(f"search space choice list {name} is empty")
            if len(set(vals)) != len(vals):
                raise ValidationError(f"search space choice list {name} has duplicates")
        if any(not 0.5 < f < 1.0 for f in self.fractions_of_wad):
            raise ValidationError("fraction_of_wad cutoffs must lie in (0.5, 1)")

    @classmethod
    def baseline(cls, **kw) -> "SearchSpace":
        return cls(tl_active=False, **kw)

    @classmethod
    def transfer(cls, **kw) -> "SearchSpace":
        return cls(tl_active=True, **kw)

    def choices(self, name: str) -> tuple:
        return {
            "learning_rate": self.learning_rates,
            "weight_decay": self.weight_decays,
            "mixed_training": self.mixed_training,
            "feature_extraction": self.feature_extraction,
            "fraction_of_wad": self.fractions_of_wad,
        }[name]

    def active_params(self, partial: dict) -> list[str]:
        """Parameters that are active given the branch values in ``partial``."""
        names = ["learning_rate", "weight_decay"]
        if self.tl_active:
            names.append("mixed_training")
            if partial.get("mixed_training") is False:
                names.append("feature_extraction")
            names.append("fraction_of_wad")
        return names

    def validate(self, params: dict) -> None:
        expected = self.active_params(params)
        if set(params) != set(expected):
            raise ValidationError(f"config keys {sorted(params)} do not match active parameters {sorted(expected)}")
        for k, v in params.items():
            if v not in self.choices(k):
                raise ValidationError(f"{k}={v!r} not among {self.choices(k)}")


@dataclass(frozen=True)
class TrialConfig:
    params: dict
    trial_id: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, key):
        return self.params[key]

    @property
    def learning_rate(self) -> float:
        return self.params["learning_rate"]

    @property
    def weight_decay(self) -> float:
        return self.params["weight_decay"]

    @property
    def fraction_of_wad(self) -> float | None:
        return self.params.get("fraction_of_wad")

    @property
    def strategy(self) -> TLStrategy:
        return TLStrategy.from_flags(self.params.get("mixed_training"), self.params.get("feature_extraction"))

    def key(self) -> tuple:
        return tuple((k, self.params[k]) for k in PARAM_ORDER if k in self.params)


def enumerate_grid(space: SearchSpace) -> list[TrialConfig]:
    out = []
    for lr, wd in itertools.product(space.learning_rates, space.weight_decays):
        if not space.tl_active:
            out.append({"learning_rate": lr, "weight_decay": wd})
            continue
        for mixed in space.mixed_training:
            fe_opts = (None,) if mixed else space.feature_extraction
            for fe in fe_opts:
                for frac in space.fractions_of_wad:
                    p = {"learning_rate": lr, "weight_decay": wd, "mixed_training": mixed}
                    if fe is not None:
                        p["feature_extraction"] = fe
                    p["fraction_of_wad"] = frac
                    out.append(p)
    return [TrialConfig(p, trial_id=i) for i, p in enumerate(out)]


# -- study bookkeeping ------------------------------------------------------


@dataclass
class TrialRecord:
    config: TrialConfig
    status: str  # completed | pruned | failed
    value: float | None = None
    intermediate: dict[int, float] = field(default_factory=dict)
    error: str | None = None
    started: float = 0.0
    finished: float = 0.0
    artifact: object = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "trial_id": self.config.trial_id,
            "config": self.config.params,
            "seed": self.config.seed,
            "meta": self.config.meta,
            "status": self.status,
            "objective": self.value,
            "intermediate": {str(k): v for k, v in sorted(self.intermediate.items())},
            "error": self.error,
            "started": self.started,
            "finished": self.finished,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrialRecord":
        cfg = TrialConfig(dict(d["config"]), d["trial_id"], d.get("seed", 0), d.get("meta", {}))
        return cls(
            cfg,
            d["status"],
            d.get("objective"),
            {int(k): v for k, v in d.get("intermediate", {}).items()},
            d.get("error"),
            d.get("started", 0.0),
            d.get("finished", 0.0),
        )


@dataclass(frozen=True)
class Budget:
    n_trials: int | None = None
    seconds: float | None = None

    def __post_init__(self):
        if self.n_trials is not None and self.n_trials < 1:
            raise ValidationError("trial budget must be positive")
        if self.seconds is not None and self.seconds <= 0:
            raise ValidationError("time budget must be positive")


@dataclass
class StudyRecord:
    trials: list[TrialRecord] = field(default_factory=list)
    budget: Budget = field(default_factory=Budget)
    sampler: str = "grid"
    seed: int = 0

    @property
    def completed(self) -> list[TrialRecord]:
        return [t for t in self.trials if t.status == "completed"]

    @property
    def best_trial(self) -> TrialRecord | None:
        best = None
        for t in self.completed:
            if t.value is None or (isinstance(t.value, float) and math.isnan(t.value)):
                continue
            if best is None or t.value > best.value:
                best = t
        return best

    def values_at(self, step: int) -> list[float]:
        return [t.intermediate[step] for t in self.completed if step in t.intermediate]

    def summary(self) -> list[dict]:
        return [{k: v for k, v in t.to_json().items() if k not in ("started", "finished")} for t in self.trials]


# -- pruning ----------------------------------------------------------------


def should_prune_median(
    intermediate: float, step: int, history: Sequence[float], min_trials: int = 5, warmup_steps: int = 5
) -> bool:
    """Prune iff past warm-up, enough history, and strictly below the median."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    if step < warmup_steps or len(history) < min_trials or not history:
        return False
    return intermediate < statistics.median(history)


@dataclass(frozen=True)
class MedianPruner:
    min_trials: int = 5
    warmup_steps: int = 5

    def __call__(self, value: float, step: int, history: StudyRecord) -> bool:
        return should_prune_median(value, step, history.values_at(step), self.min_trials, self.warmup_steps)


class Trial:
    """Handle passed to objectives: exposes the config and accepts reports."""

    def __init__(self, config: TrialConfig, pruner, snapshot: StudyRecord):
        self.config = config
        self.params = config.params
        self.intermediate: dict[int, float] = {}
        self.artifact = None
        self._pruner = pruner
        self._snapshot = snapshot

    def report(self, step: int, value: float) -> None:
        self.intermediate[int(step)] = float(value)
        if self._pruner is not None and self._pruner(float(value), int(step), self._snapshot):
            raise TrialPruned(f"pruned at step {step}")


# -- samplers ---------------------------------------------------------------


def _sample_random(space: SearchSpace, rng: np.random.Generator) -> dict:
    leaves = enumerate_grid(space)
    return dict(leaves[int(rng.integers(len(leaves)))].params)


def _tpe_choice(name, choices, good, bad, rng, n_candidates, prior_weight):
    good_vals = [t.config.params[name] for t in good if name in t.config.params]
    bad_vals = [t.config.params[name] for t in bad if name in t.config.params]
    k = len(choices)

    def density(vals):
        counts = np.array([sum(v == c for v in vals) for c in choices], dtype=float)
        return (counts + prior_weight / k) / (len(vals) + prior_weight)

    l, g = density(good_vals), density(bad_vals)
    cand = rng.choice(k, size=n_candidates, p=l)
    ratio = l[cand] / g[cand]
    return choices[int(cand[int(np.argmax(ratio))])]


def sample_next_trial(
    space: SearchSpace,
    sampler: str,
    history: StudyRecord,
    rng: np.random.Generator,
    n_startup: int = 10,
    gamma: float = 0.25,
    n_candidates: int = 24,
    prior_weight: float = 1.0,
) -> TrialConfig:
    """Propose the next configuration.

    ``grid`` walks :func:`enumerate_grid` skipping visited points, ``random``
    draws a leaf uniformly, ``tpe`` fits categorical Parzen densities to the
    top ``gamma`` fraction of completed trials versus the rest and keeps the
    candidate with the best density ratio; branch parameters are sampled
    first so conditionals hold. TPE falls back to random sampling until
    ``n_startup`` trials have completed.
    """
    if sampler == "grid":
        visited = {t.config.key() for t in history.trials}
        for cfg in enumerate_grid(space):
            if cfg.key() not in visited:
                return TrialConfig(cfg.params, meta={"sampler": "grid"})
        raise GridExhausted("every grid point has been visited")
    if sampler == "random":
        return TrialConfig(_sample_random(space, rng), meta={"sampler": "random"})
    if sampler != "tpe":
        raise ValidationError(f"unknown sampler {sampler!r}")

    done = [t for t in history.completed if t.value is not None and not math.isnan(t.value)]
    if len(done) < n_startup:
        return TrialConfig(_sample_random(space, rng), meta={"sampler": "tpe", "startup_random": True})
    ranked = sorted(done, key=lambda t: t.value, reverse=True)
    n_good = max(1, int(math.ceil(gamma * len(ranked))))
    good, bad = ranked[:n_good], ranked[n_good:]
    params: dict = {}
    order = [n for n in BRANCH_ORDER] + ["learning_rate", "weight_decay"]
    for name in order:
        if name not in space.active_params(params):
            continue
        params[name] = _tpe_choice(name, space.choices(name), good, bad, rng, n_candidates, prior_weight)
    params = {k: params[k] for k in PARAM_ORDER if k in params}
    return TrialConfig(params, meta={"sampler": "tpe", "startup_random": False})


# -- study loop -------------------------------------------------------------


def _load_log(path: Path) -> list[TrialRecord]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(TrialRecord.from_json(json.loads(line)))
    return out


def _run_one(objective, cfg: TrialConfig, pruner, snapshot: StudyRecord) -> TrialRecord:
    trial = Trial(cfg, pruner, snapshot)
    started = time.time()
    try:
        out = objective(trial)
        if isinstance(out, tuple):
            per_epoch, value = out
            for step, v in enumerate(per_epoch, 1):
                trial.intermediate.setdefault(step, float(v))
        else:
            value = out
        rec = TrialRecord(cfg, "completed", float(value), dict(trial.intermediate))
    except TrialPruned:
        rec = TrialRecord(cfg, "pruned", None, dict(trial.intermediate))
    except Exception as exc:  # objective failures are isolated per trial
        log.warning("trial %d failed: %s", cfg.trial_id, exc)
        rec = TrialRecord(cfg, "failed", None, dict(trial.intermediate), error=f"{type(exc).__name__}: {exc}")
        log.debug(traceback.format_exc())
    rec.artifact = trial.artifact
    rec.started, rec.finished = started, time.time()
    return rec


def run_study(
    objective: Callable[[Trial], object],
    space: SearchSpace,
    sampler: str = "grid",
    pruner: MedianPruner | None = None,
    budget: Budget | None = None,
    seed: int = 0,
    *,
    log_path=None,
    parallelism: int = 1,
    n_startup: int = 10,
    on_trial: Callable[[TrialRecord], None] | None = None,
) -> StudyRecord:
    """Run trials until the budget or the grid runs out.

    Trials are dispatched in waves of ``parallelism``; samplers and the
    pruner see the history as it stood when the wave started, and records
    are appended in trial-id order, so a given seed always produces the same
    study. With ``log_path`` every finished trial is appended as one JSON
    line and an existing log is resumed.
    """
    budget = budget or Budget()
    if parallelism < 1:
        raise ValidationError("parallelism must be >= 1")
    study = StudyRecord(budget=budget, sampler=sampler, seed=seed)
    log_file = Path(log_path) if log_path is not None else None
    if log_file is not None:
        study.trials.extend(_load_log(log_file))
        log_file.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    exhausted = False
    while not exhausted:
        remaining = parallelism
        if budget.n_trials is not None:
            remaining = min(remaining, budget.n_trials - len(study.trials))
        if remaining <= 0:
            break
        if budget.seconds is not None and time.monotonic() - t0 >= budget.seconds:
            break
        snapshot = StudyRecord(list(study.trials), budget, sampler, seed)
        wave: list[TrialConfig] = []
        for _ in range(remaining):
            tid = len(study.trials) + len(wave)
            view = StudyRecord(snapshot.trials + [TrialRecord(c, "running") for c in wave], budget, sampler, seed)
            try:
                cfg = sample_next_trial(space, sampler, view, rng_for(seed, "sampler", tid), n_startup=n_startup)
            except GridExhausted:
                exhausted = True
                break
            space.validate(cfg.params)
            wave.append(TrialConfig(cfg.params, tid, derive_seed(seed, "trial", tid), cfg.meta))
        if not wave:
            break
        if parallelism > 1 and len(wave) > 1:
            with ThreadPoolExecutor(len(wave)) as pool:
                records = list(pool.map(lambda c: _run_one(objective, c, pruner, snapshot), wave))
        else:
            records = [_run_one(objective, c, pruner, snapshot) for c in wave]
        for rec in records:
            study.trials.append(rec)
            if log_file is not None:
                with open(log_file, "a") as fh:
                    fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            if on_trial is not None:
                on_trial(rec)
    return study

"""Paired permutation test for the difference of two ROC AUCs.

Both models are scored on the same records. Under the null the two scores
of a record are exchangeable, so each permutation swaps the pair
``(a_i, b_i)`` independently with probability 1/2 and recomputes
``AUC_a - AUC_b``. The two-sided p-value is add-one smoothed.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError

SHARD_SIZE = 1000


@dataclass(frozen=True)
class PairedComparison:
    labels: np.ndarray
    scores_a: np.ndarray
    scores_b: np.ndarray
    n_permutations: int = 10_000
    alpha: float = 0.05
    seed: int = 0
    sided: str = "two_sided"

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        a = np.asarray(self.scores_a, dtype=np.float64)
        b = np.asarray(self.scores_b, dtype=np.float64)
        if not (y.ndim == a.ndim == b.ndim == 1) or not (len(y) == len(a) == len(b)):
            raise ValidationError(f"misaligned inputs: {len(y)} labels, {len(a)} / {len(b)} scores")
        if not np.isin(y, (0, 1)).all():
            raise ValidationError("labels must be binary 0/1")
        for name, s in (("scores_a", a), ("scores_b", b)):
            if not (np.isfinite(s).all() and (s >= 0).all() and (s <= 1).all()):
                raise ValidationError(f"{name} must be probabilities in [0, 1]")
        if self.n_permutations < 1:
            raise ValidationError("n_permutations must be positive")
        if self.sided != "two_sided":
            raise ValidationError("only the two-sided test is implemented")
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "scores_a", a)
        object.__setattr__(self, "scores_b", b)


@dataclass(frozen=True)
class PermutationResult:
    observed_delta: float
    p_value: float
    auc_a: float
    auc_b: float
    n_permutations: int
    seed: int

    def __iter__(self):
        return iter((self.observed_delta, self.p_value))

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def auc_rows(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mann-Whitney AUC for each row of ``scores`` (mid-ranks for ties)."""
    scores = np.atleast_2d(scores)
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores, axis=1)
    return (ranks[:, pos].sum(axis=1) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _delta_rows(a, b, labels, swap):
    sa = np.where(swap, b, a)
    sb = np.where(swap, a, b)
    return auc_rows(sa, labels) - auc_rows(sb, labels)


def _count_shard(cmp: PairedComparison, shard_seed, size, observed) -> int:
    rng = np.random.default_rng(shard_seed)
    swap = rng.random((size, cmp.labels.size)) < 0.5
    deltas = _delta_rows(cmp.scores_a, cmp.scores_b, cmp.labels, swap)
    # tolerate float noise so that exact ties count as extreme
    return int(np.sum(np.abs(deltas) >= abs(observed) - 1e-12))


def paired_auc_permutation_test(cmp: PairedComparison, n_jobs: int = 1) -> PermutationResult:
    y = cmp.labels
    if y.sum() == 0 or y.sum() == y.size:
        raise UndefinedMetricError("both classes must be present")
    auc_a, auc_b = auc_rows(np.vstack([cmp.scores_a, cmp.scores_b]), y)
    observed = float(auc_a - auc_b)

    # fixed shard layout so the result does not depend on n_jobs
    sizes = [SHARD_SIZE] * (cmp.n_permutations // SHARD_SIZE)
    if cmp.n_permutations % SHARD_SIZE:
        sizes.append(cmp.n_permutations % SHARD_SIZE)
    seeds = np.random.SeedSequence(cmp.seed).spawn(len(sizes))
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            counts = list(pool.map(lambda args: _count_shard(cmp, *args, observed), zip(seeds, sizes)))
    else:
        counts = [_count_shard(cmp, s, n, observed) for s, n in zip(seeds, sizes)]
    extreme = sum(counts)
    p = (1 + extreme) / (1 + cmp.n_permutations)
    return PermutationResult(observed, p, float(auc_a), float(auc_b), cmp.n_permutations, cmp.seed)


def exact_permutation_p(labels, scores_a, scores_b) -> float:
    """Exhaustive two-sided p over all 2^n swap patterns (no smoothing); small n only."""
    y = np.asarray(labels, dtype=np.int64)
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    n = y.size
    if n > 20:
        raise ValidationError("exhaustive enumeration is limited to n <= 20")
    masks = ((np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    deltas = _delta_rows(a, b, y, masks)
    observed = deltas[0]
    return float(np.mean(np.abs(deltas) >= abs(observed) - 1e-12))


def write_comparison_report(result: PermutationResult, path, name_a: str, name_b: str, alpha: float = 0.05) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "model_a": name_a,
        "model_b": name_b,
        "auc_a": round(result.auc_a, 12),
        "auc_b": round(result.auc_b, 12),
        "delta": round(result.observed_delta, 12),
        "p_value": round(result.p_value, 12),
        "alpha": alpha,
        "significant": bool(result.p_value < alpha),
        "n_permutations": result.n_permutations,
        "seed": result.seed,
        "sided": "two_sided",
    }
    path.write_text(json.dumps(body, indent=2) + "\n")
    return path

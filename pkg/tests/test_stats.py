import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gliotl.errors import UndefinedMetricError, ValidationError
from gliotl.stats import (
    PairedComparison,
    auc_rows,
    exact_permutation_p,
    paired_auc_permutation_test,
    write_comparison_report,
)
from oracles import exact_swap_p, pair_auc


def null_case(rng, n):
    # within a record the two scores are exchangeable
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)].astype(int)
    shift = 0.2 * y
    a = np.clip(rng.random(n) * 0.8 + shift, 0, 1)
    b = np.clip(rng.random(n) * 0.8 + shift, 0, 1)
    return y, a, b


def test_auc_rows_matches_pair_oracle(rng):
    y = rng.integers(0, 2, 15)
    y[:2] = [0, 1]
    s = np.round(rng.random((6, 15)), 1)
    got = auc_rows(s, y)
    assert np.allclose(got, [pair_auc(row, y) for row in s], atol=1e-12)


def test_exact_enumeration_matches_oracle(rng):
    y, a, b = null_case(rng, 10)
    assert exact_permutation_p(y, a, b) == pytest.approx(exact_swap_p(y, a, b), abs=1e-12)


def test_sampled_p_close_to_exact():
    rng = np.random.default_rng(5)
    for _ in range(3):
        y, a, b = null_case(rng, 10)
        b = np.clip(b + 0.3 * y, 0, 1)
        res = paired_auc_permutation_test(PairedComparison(y, a, b, n_permutations=10_000, seed=1))
        assert abs(res.p_value - exact_permutation_p(y, a, b)) <= 0.02


def test_identical_scores_give_p_one(rng):
    y, a, _ = null_case(rng, 30)
    res = paired_auc_permutation_test(PairedComparison(y, a, a, n_permutations=500))
    assert res.p_value == 1.0 and res.observed_delta == 0.0


def test_perfect_vs_random_is_significant():
    rng = np.random.default_rng(3)
    y = np.r_[np.zeros(20), np.ones(20)].astype(int)
    perfect = np.where(y == 1, 0.9, 0.1)
    res = paired_auc_permutation_test(PairedComparison(y, perfect, rng.random(40), n_permutations=2000))
    assert res.auc_a == 1.0 and res.p_value < 0.05 and res.significant(0.05)


def test_symmetric_in_models(rng):
    y, a, b = null_case(rng, 24)
    r1 = paired_auc_permutation_test(PairedComparison(y, a, b, n_permutations=3000, seed=9))
    r2 = paired_auc_permutation_test(PairedComparison(y, b, a, n_permutations=3000, seed=9))
    assert r1.p_value == r2.p_value and r1.observed_delta == -r2.observed_delta


def test_smoothing_floor():
    y = np.r_[np.zeros(20), np.ones(20)].astype(int)
    res = paired_auc_permutation_test(PairedComparison(y, y * 0.8 + 0.1, 1 - (y * 0.8 + 0.1), n_permutations=999))
    assert res.p_value >= 1 / 1000


def test_null_false_positive_rate():
    rng = np.random.default_rng(2024)
    hits = 0
    for i in range(200):
        y, a, b = null_case(rng, 30)
        res = paired_auc_permutation_test(PairedComparison(y, a, b, n_permutations=1000, seed=i))
        hits += res.p_value < 0.05
    assert hits / 200 <= 0.08


def test_shard_layout_independent_of_jobs(rng):
    y, a, b = null_case(rng, 20)
    cmp = PairedComparison(y, a, b, n_permutations=4500, seed=4)
    assert paired_auc_permutation_test(cmp, 1) == paired_auc_permutation_test(cmp, 4)


def test_seed_changes_sampling_only_slightly(rng):
    y, a, b = null_case(rng, 20)
    ps = [paired_auc_permutation_test(PairedComparison(y, a, b, n_permutations=5000, seed=s)).p_value for s in range(3)]
    assert max(ps) - min(ps) < 0.05


def test_input_validation():
    with pytest.raises(ValidationError):
        PairedComparison([0, 1], [0.1, 0.2], [0.1])
    with pytest.raises(ValidationError):
        PairedComparison([0, 2], [0.1, 0.2], [0.1, 0.3])
    with pytest.raises(ValidationError):
        PairedComparison([0, 1], [0.1, 1.2], [0.1, 0.3])
    with pytest.raises(ValidationError):
        PairedComparison([0, 1], [0.1, 0.2], [0.1, 0.3], sided="greater")
    with pytest.raises(UndefinedMetricError):
        paired_auc_permutation_test(PairedComparison([1, 1], [0.1, 0.2], [0.1, 0.3]))


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_p_value_in_range(seed):
    rng = np.random.default_rng(seed)
    y, a, b = null_case(rng, 12)
    res = paired_auc_permutation_test(PairedComparison(y, a, b, n_permutations=200, seed=seed))
    assert 1 / 201 <= res.p_value <= 1.0


def test_report_written(tmp_path, rng):
    y, a, b = null_case(rng, 20)
    res = paired_auc_permutation_test(PairedComparison(y, a, b, n_permutations=100))
    path = write_comparison_report(res, tmp_path / "cmp.json", "vgg", "vgg_tl")
    body = json.loads(path.read_text())
    assert body["model_a"] == "vgg" and body["p_value"] == pytest.approx(res.p_value)

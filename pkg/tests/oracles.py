"""Brute-force reference implementations used by several test modules."""

import itertools

import numpy as np


def pair_auc(scores, labels):
    """Mann-Whitney: fraction of (pos, neg) pairs ranked correctly, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    won = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return won / (len(pos) * len(neg))


def sweep_aupr(scores, labels):
    """Recompute precision and recall from scratch at every distinct threshold."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    n_pos = labels.sum()
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return total


def contingency_kappa(a, b):
    cats = sorted(set(a) | set(b), key=str)
    idx = {c: i for i, c in enumerate(cats)}
    table = np.zeros((len(cats), len(cats)))
    for x, y in zip(a, b):
        table[idx[x], idx[y]] += 1
    n = table.sum()
    p_o = np.trace(table) / n
    p_e = float(table.sum(1) @ table.sum(0)) / n**2
    return (p_o - p_e) / (1 - p_e)


def exact_swap_p(labels, a, b):
    """Enumerate all 2^n per-sample swaps of the two score vectors."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    obs = abs(pair_auc(a, labels) - pair_auc(b, labels))
    hits = 0
    n = len(a)
    for mask in itertools.product((False, True), repeat=n):
        m = np.array(mask)
        pa, pb = np.where(m, b, a), np.where(m, a, b)
        if abs(pair_auc(pa, labels) - pair_auc(pb, labels)) >= obs - 1e-12:
            hits += 1
    return hits / 2**n


def random_prediction_arrays(rng, max_n=20):
    """Random small binary problem with both classes and deliberate ties."""
    while True:
        n = int(rng.integers(2, max_n + 1))
        labels = rng.integers(0, 2, n)
        if 0 < labels.sum() < n:
            break
    scores = np.round(rng.random(n), int(rng.integers(1, 3)))
    return scores, labels

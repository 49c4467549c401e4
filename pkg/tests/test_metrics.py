import itertools

import numpy as np
import pytest

from c2r.metrics import (EvalReport, MetricError, accuracy, aggregate, binary_auc, env_agreement,
                         precision_at_k, random_precision_baseline)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------- accuracy

def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 2, 2], [0, 2, 2, 2]) == 0.75
    y = np.tile([0, 1, 2], 100)
    assert accuracy(np.zeros_like(y), y) == pytest.approx(1 / 3)


def test_accuracy_length_mismatch():
    with pytest.raises(MetricError):
        accuracy([0, 1], [0])


# --------------------------------------------------------------------- AUC

def test_auc_examples():
    assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert binary_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class_rejected():
    with pytest.raises(MetricError):
        binary_auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 6, size=n) / 5.0  # coarse grid forces ties
        assert abs(binary_auc(scores, labels) - brute_auc(scores, labels)) <= 1e-12


# ------------------------------------------------------------ Precision@k

def test_precision_mask_as_scores():
    mask = np.array([1, 0, 1, 1, 0, 1, 1, 0], bool)
    rep = precision_at_k([mask.astype(float)], [mask])
    assert rep.precision == 1.0 and rep.n_graphs == 1


def test_precision_house_one_miss():
    mask = np.zeros(12, bool)
    mask[[2, 4, 6, 8, 10]] = True
    exact = np.where(mask, 1.0, 0.0)
    assert precision_at_k([exact], [mask]).precision == 1.0
    miss = exact.copy()
    miss[10], miss[0] = 0.0, 0.9
    assert precision_at_k([miss], [mask]).precision == pytest.approx(0.8)


def test_precision_ties_go_to_lower_index():
    mask = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1], bool)
    assert precision_at_k([np.ones(10)], [mask]).precision == 0.0
    assert precision_at_k([np.ones(10)], [mask[::-1]]).precision == 1.0


def test_precision_monotone_invariant():
    rng = np.random.default_rng(1)
    scores = [rng.random(n) for n in (8, 15, 30)]
    masks = [rng.random(len(s)) < 0.3 for s in scores]
    base = precision_at_k(scores, masks).precision
    for f in (np.log, lambda z: 3 * z - 7, lambda z: np.log(z) - np.log1p(-z), np.exp):
        assert precision_at_k([f(s) for s in scores], masks).precision == base


def test_precision_skips_small_graphs():
    rep = precision_at_k([np.ones(3), np.ones(6)], [np.ones(3, bool), np.ones(6, bool)])
    assert rep.n_skipped == 1 and rep.n_graphs == 1 and rep.precision == 1.0


def test_precision_needs_mask():
    with pytest.raises(MetricError):
        precision_at_k([np.ones(6)], [None])


def test_random_scores_match_motif_fraction():
    rng = np.random.default_rng(2)
    masks = []
    for _ in range(20):
        n = int(rng.integers(20, 40))
        m = np.zeros(n, bool)
        m[rng.choice(n, size=int(rng.integers(5, 9)), replace=False)] = True
        masks.append(m)
    draws = [precision_at_k([rng.random(len(m)) for m in masks], masks).precision
             for _ in range(2000)]
    assert abs(np.mean(draws) - random_precision_baseline(masks)) < 0.005


# ------------------------------------------------------------ env agreement

def test_env_agreement_is_label_permutation_free():
    hint = np.array([0, 0, 1, 1, 2, 2])
    assert env_agreement([2, 2, 0, 0, 1, 1], hint) == 1.0
    assert env_agreement([0, 1, 0, 1, 0, 1], hint) == pytest.approx(2 / 6)


# --------------------------------------------------------------- aggregate

def test_aggregate_single_seed():
    out = aggregate([EvalReport(acc=0.7, n_samples=10)])
    assert out["acc"] == {"mean": 0.7, "std": 0.0, "n": 1}


def test_aggregate_two_seeds():
    out = aggregate([{"acc": 0.4}, {"acc": 0.6}])
    assert out["acc"]["mean"] == pytest.approx(0.5, abs=1e-15)
    assert out["acc"]["std"] == pytest.approx(0.1, abs=1e-15)


def test_aggregate_order_free_bitwise():
    vals = np.random.default_rng(3).random(7)
    a = aggregate([{"acc": v} for v in vals])
    b = aggregate([{"acc": v} for v in vals[::-1]])
    c = aggregate([{"acc": v} for v in vals[[3, 0, 6, 1, 5, 2, 4]]])
    assert a == b == c


def test_aggregate_heterogeneous_rejected():
    with pytest.raises(MetricError):
        aggregate([{"acc": 0.1}, {"acc": 0.2, "auc": 0.5}])
    with pytest.raises(MetricError):
        aggregate([])

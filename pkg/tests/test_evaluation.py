"""Evaluation: accuracy, k-NN vs brute force, linear probes, CKA vs HSIC oracle."""

import numpy as np
import pytest

from mlkd.errors import DataError, DegenerateInputError, ParameterError
from mlkd.evaluation import (
    EvalReport,
    ProbeConfig,
    cka_similarity,
    knn_classify,
    linear_probe,
    top1_accuracy,
    topk_accuracy,
)


# -- top-1 ---------------------------------------------------------------


def test_top1_perfect_and_inverted():
    logits = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert top1_accuracy(logits, [0, 1]) == 1.0
    assert top1_accuracy(logits, [1, 0]) == 0.0


def test_top1_hand_count():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=10)
    logits = rng.normal(size=(10, 4))
    # force exactly 7 correct
    preds = np.argmax(logits, axis=1)
    want_correct = 7
    for i in range(10):
        if i < want_correct:
            logits[i] = 0.0
            logits[i, labels[i]] = 1.0
        else:
            logits[i] = 0.0
            logits[i, (labels[i] + 1) % 4] = 1.0
    assert top1_accuracy(logits, labels) == 0.7


def test_top1_tie_breaks_to_lowest_index():
    logits = np.array([[0.5, 0.5, 0.1]])
    assert top1_accuracy(logits, [0]) == 1.0
    assert top1_accuracy(logits, [1]) == 0.0


def test_top1_empty_rejected():
    with pytest.raises(DataError):
        top1_accuracy(np.zeros((0, 3)), [])


def test_topk_contains_label():
    logits = np.array([[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]])
    assert topk_accuracy(logits, [4], k=5) == 1.0
    assert topk_accuracy(logits, [5], k=5) == 0.0


# -- knn -------------------------------------------------------------------


def brute_force_knn(train_feats, train_labels, test_feats, k):
    tr = train_feats / np.linalg.norm(train_feats, axis=1, keepdims=True)
    te = test_feats / np.linalg.norm(test_feats, axis=1, keepdims=True)
    preds = []
    for t in te:
        sims = np.array([t @ x for x in tr])
        order = np.argsort(-sims, kind="stable")[:k]
        votes = {}
        for idx in order:
            votes[train_labels[idx]] = votes.get(train_labels[idx], 0) + 1
        best = max(votes.values())
        tied = {c for c, v in votes.items() if v == best}
        for idx in order:
            if train_labels[idx] in tied:
                preds.append(train_labels[idx])
                break
    return np.array(preds)


def test_knn_duplicate_point_k1():
    train = np.array([[1.0, 0.0], [0.0, 1.0]])
    labels = np.array([3, 5])
    preds = knn_classify(train, labels, np.array([[0.0, 2.0]]), k=1)
    assert preds[0] == 5


def test_knn_single_class():
    rng = np.random.default_rng(1)
    train = rng.normal(size=(20, 4))
    labels = np.full(20, 2)
    preds = knn_classify(train, labels, rng.normal(size=(5, 4)), k=10)
    assert np.all(preds == 2)


def test_knn_matches_brute_force_on_100_points():
    rng = np.random.default_rng(2)
    train = rng.normal(size=(100, 6))
    labels = rng.integers(0, 5, size=100)
    test = rng.normal(size=(40, 6))
    got = knn_classify(train, labels, test, k=10)
    want = brute_force_knn(train, labels, test, k=10)
    np.testing.assert_array_equal(got, want)


def test_knn_invariant_to_positive_rescaling():
    rng = np.random.default_rng(3)
    train = rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, size=30)
    test = rng.normal(size=(10, 4))
    base = knn_classify(train, labels, test, k=5)
    scales = rng.uniform(0.1, 10.0, size=(30, 1))
    np.testing.assert_array_equal(
        base, knn_classify(train * scales, labels, test * 2.5, k=5))


def test_knn_k_out_of_range():
    train = np.ones((3, 2))
    with pytest.raises(ParameterError):
        knn_classify(train, [0, 1, 2], np.ones((1, 2)), k=4)


def test_knn_zero_feature_rejected():
    train = np.vstack([np.zeros(3), np.ones(3)])
    with pytest.raises(DegenerateInputError):
        knn_classify(train, [0, 1], np.ones((1, 3)), k=1)


# -- linear probe --------------------------------------------------------------


def test_probe_separable_reaches_perfect():
    rng = np.random.default_rng(4)
    n = 60
    feats = np.vstack([rng.normal(size=(n, 3)) + [6, 0, 0],
                       rng.normal(size=(n, 3)) - [6, 0, 0]])
    labels = np.array([0] * n + [1] * n)
    acc = linear_probe(feats, labels, feats, labels,
                       ProbeConfig(epochs=30, decay_epochs=(20, 26)))
    assert acc == 1.0


def test_probe_chance_level_on_random_labels():
    rng = np.random.default_rng(5)
    k = 4
    feats_train = rng.normal(size=(400, 6))
    feats_test = rng.normal(size=(400, 6))
    labels_train = rng.integers(0, k, size=400)
    labels_test = rng.integers(0, k, size=400)
    acc = linear_probe(feats_train, labels_train, feats_test, labels_test,
                       ProbeConfig(epochs=25, decay_epochs=(15, 20)))
    p = 1.0 / k
    sigma = np.sqrt(p * (1 - p) / 400)
    assert abs(acc - p) < 3 * sigma + 0.02


def test_probe_deterministic_per_seed():
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(50, 4))
    labels = rng.integers(0, 3, size=50)
    cfg = ProbeConfig(epochs=10, decay_epochs=(6, 8), seed=3)
    a = linear_probe(feats, labels, feats, labels, cfg)
    b = linear_probe(feats, labels, feats, labels, cfg)
    assert a == b


def test_probe_single_class_rejected():
    feats = np.random.default_rng(7).normal(size=(10, 3))
    with pytest.raises(DataError):
        linear_probe(feats, np.zeros(10, dtype=int), feats, np.zeros(10, dtype=int))


def test_probe_beats_majority_on_train():
    rng = np.random.default_rng(8)
    feats = np.vstack([rng.normal(size=(40, 3)) + [3, 0, 0],
                       rng.normal(size=(20, 3)) - [3, 0, 0]])
    labels = np.array([0] * 40 + [1] * 20)
    acc = linear_probe(feats, labels, feats, labels,
                       ProbeConfig(epochs=20, decay_epochs=(12, 16)))
    assert acc >= 40 / 60


# -- CKA ------------------------------------------------------------------------


def hsic_oracle(k, l):
    """Literal double-centering double-loop HSIC."""
    n = k.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    kc = h @ k @ h
    lc = h @ l @ h
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += kc[i, j] * lc[i, j]
    return total


def test_cka_self_similarity_is_one():
    x = np.random.default_rng(9).normal(size=(10, 4))
    assert abs(cka_similarity(x, x, kernel="linear") - 1.0) < 1e-10
    assert abs(cka_similarity(x, x, kernel="rbf") - 1.0) < 1e-10


def test_cka_invariant_to_orthogonal_transform():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(12, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert abs(cka_similarity(x, x @ q, kernel="linear") - 1.0) < 1e-10


def test_cka_matches_double_loop_hsic_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 4))
    got = cka_similarity(x, y, kernel="linear")
    kx, ky = x @ x.T, y @ y.T
    want = hsic_oracle(kx, ky) / np.sqrt(hsic_oracle(kx, kx) * hsic_oracle(ky, ky))
    assert abs(got - want) < 1e-10


def test_cka_in_unit_interval_and_symmetric():
    rng = np.random.default_rng(12)
    for _ in range(20):
        x = rng.normal(size=(8, 3))
        y = rng.normal(size=(8, 5))
        for kernel in ("linear", "rbf"):
            v = cka_similarity(x, y, kernel=kernel)
            assert 0.0 <= v <= 1.0
            assert abs(v - cka_similarity(y, x, kernel=kernel)) < 1e-10


def test_cka_constant_features_rejected():
    x = np.ones((6, 3))
    y = np.random.default_rng(13).normal(size=(6, 3))
    with pytest.raises(DegenerateInputError):
        cka_similarity(x, y, kernel="linear")


def test_cka_needs_matching_samples():
    rng = np.random.default_rng(14)
    with pytest.raises(ParameterError):
        cka_similarity(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))
    with pytest.raises(ParameterError):
        cka_similarity(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))


def test_eval_report_json():
    report = EvalReport(mode="top1", top1=0.5, n_test=10, seed=1, top5=0.9)
    payload = report.to_json()
    assert payload == {"mode": "top1", "top1": 0.5, "n_test": 10, "seed": 1, "top5": 0.9}

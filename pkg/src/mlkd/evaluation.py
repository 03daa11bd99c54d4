"""Accuracy, k-NN, linear-probe, and CKA evaluation of frozen features."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, save_dataset
from .errors import DataError, DegenerateInputError, ParameterError
from .losses import loss_ce
from .networks import make_linear_head
from .tensor import GradTape, Tensor
from .training import sgd_step


@dataclass
class EvalReport:
    """Result of one evaluation; serializes straight to JSON."""

    mode: str
    top1: float
    n_test: int
    seed: int = 0
    top5: float | None = None
    per_class: list | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def export_features(feats: np.ndarray, labels, path, class_count: int | None = None) -> None:
    """Write feature rows to the standard container for external tools.

    Features are stored float32 with the labels when given; downstream
    embedding or plotting tools read them like any other dataset.
    """
    feats = np.asarray(feats, dtype=np.float32)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        k = class_count if class_count is not None else int(labels.max()) + 1
    else:
        k = class_count if class_count is not None else 2
    save_dataset(Dataset(feats, labels, k, {"generator": {"kind": "features"}}), path)


def top1_accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax matches the label (ties: lowest index)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.size == 0 or logits.shape[0] == 0:
        raise DataError("empty batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def topk_accuracy(logits: np.ndarray, labels, k: int = 5) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.size == 0:
        raise DataError("empty batch")
    if k > logits.shape[1]:
        raise ParameterError(f"k={k} exceeds class count {logits.shape[1]}")
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def _normalize(feats: np.ndarray, what: str) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise DegenerateInputError(f"zero-norm {what} feature at row {int(zero[0])}")
    return feats / norms[:, None]


def knn_classify(train_feats: np.ndarray, train_labels, test_feats: np.ndarray,
                 k: int = 10) -> np.ndarray:
    """Cosine k-nearest-neighbor predictions, majority vote.

    Vote ties are broken by the nearest neighbor among the tied classes;
    equal similarities fall back to the lower training index, which keeps
    predictions deterministic.
    """
    train_labels = np.asarray(train_labels)
    if k < 1 or k > len(train_labels):
        raise ParameterError(f"k={k} must lie in [1, n_train={len(train_labels)}]")
    tr = _normalize(train_feats, "train")
    te = _normalize(test_feats, "test")
    sims = te @ tr.T
    predictions = np.empty(len(te), dtype=train_labels.dtype)
    for i in range(len(te)):
        order = np.argsort(-sims[i], kind="stable")[:k]
        votes = train_labels[order]
        classes, counts = np.unique(votes, return_counts=True)
        best = counts.max()
        tied = set(classes[counts == best])
        if len(tied) == 1:
            predictions[i] = tied.pop()
        else:
            for neighbor in order:
                if train_labels[neighbor] in tied:
                    predictions[i] = train_labels[neighbor]
                    break
    return predictions


@dataclass
class ProbeConfig:
    """Linear-probe training schedule (step decay at 60/80 of 100 epochs)."""

    epochs: int = 100
    lr: float = 0.1
    decay_epochs: tuple = (60, 80)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    seed: int = 0


def linear_probe(train_feats: np.ndarray, train_labels,
                 test_feats: np.ndarray, test_labels,
                 probe_config: ProbeConfig | None = None) -> float:
    """Train one affine layer on frozen features; return test top-1."""
    cfg = probe_config or ProbeConfig()
    train_feats = np.asarray(train_feats, dtype=np.float64)
    test_feats = np.asarray(test_feats, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    classes = int(train_labels.max()) + 1
    if len(np.unique(train_labels)) < 2:
        raise DataError("linear probe needs at least two classes in training data")

    head = make_linear_head(train_feats.shape[1], classes, cfg.seed)
    params = head.parameters()
    velocity = None
    n = len(train_feats)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay_factor ** sum(1 for d in cfg.decay_epochs if d <= epoch)
        order = np.random.default_rng(cfg.seed + epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = head.forward(Tensor(train_feats[idx]))
            loss = loss_ce(logits, train_labels[idx])
            grads = GradTape(loss).gradients(params)
            new_data, velocity = sgd_step([p.data for p in params], grads, lr,
                                          cfg.momentum, cfg.weight_decay, velocity)
            for p, d in zip(params, new_data):
                p.data = d

    for p in params:
        p.requires_grad = False
    logits = head.forward(Tensor(test_feats))
    return top1_accuracy(logits.data, test_labels)


def _center(k: np.ndarray) -> np.ndarray:
    n = k.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    return h @ k @ h


def _rbf_kernel(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    off_diag = d2[~np.eye(len(x), dtype=bool)]
    median = np.sqrt(np.median(off_diag))
    if median == 0.0:
        raise DegenerateInputError("all pairwise distances are zero (constant features)")
    sigma = 0.5 * median
    return np.exp(-d2 / (2.0 * sigma ** 2))


def cka_similarity(x_feats: np.ndarray, y_feats: np.ndarray,
                   kernel: str = "linear") -> float:
    """Centered kernel alignment between two representation sets.

    Linear kernel: K = X X^T.  RBF kernel bandwidth is half the median
    pairwise Euclidean distance of the corresponding set.  The value is the
    normalized Hilbert-Schmidt independence criterion, which lies in [0, 1]
    and hits 1 when the two sets agree up to an orthogonal transform
    (linear kernel).
    """
    x = np.asarray(x_feats, dtype=np.float64)
    y = np.asarray(y_feats, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ParameterError(f"need matching sample counts, got {x.shape} vs {y.shape}")
    if x.shape[0] < 3:
        raise ParameterError(f"CKA needs at least 3 samples, got {x.shape[0]}")
    if kernel not in ("linear", "rbf"):
        raise ParameterError(f"kernel must be 'linear' or 'rbf', got {kernel!r}")

    if kernel == "linear":
        kx, ky = x @ x.T, y @ y.T
    else:
        kx, ky = _rbf_kernel(x), _rbf_kernel(y)
    kxc, kyc = _center(kx), _center(ky)
    hsic_xy = float(np.sum(kxc * kyc))
    hsic_xx = float(np.sum(kxc * kxc))
    hsic_yy = float(np.sum(kyc * kyc))
    # centering a constant kernel leaves only rounding residue; treat a
    # denominator that small relative to the raw kernel as exactly zero
    tiny_x = 1e-20 * (float(np.sum(kx * kx)) + 1e-300)
    tiny_y = 1e-20 * (float(np.sum(ky * ky)) + 1e-300)
    if hsic_xx <= tiny_x or hsic_yy <= tiny_y:
        raise DegenerateInputError("constant features give a zero HSIC denominator")
    value = hsic_xy / np.sqrt(hsic_xx * hsic_yy)
    # the ratio is in [0, 1] analytically; trim float-epsilon spill
    return float(min(max(value, 0.0), 1.0))

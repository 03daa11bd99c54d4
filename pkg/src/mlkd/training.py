"""Deterministic pretraining and distillation loops.

Both loops share one engine so that a distillation run with every
distillation weight at zero is bit-for-bit the same computation as plain
supervised pretraining.  Determinism rules:

  * epoch shuffling draws from ``default_rng(seed + epoch)``;
  * augmentation draws from an arithmetic derivation of (seed, epoch) so
    different purposes never share a stream;
  * head initialization seeds are fixed offsets from the run seed;
  * terms whose weight is zero are never computed, so they consume no
    randomness and add no graph nodes.

The teacher network is constructed untrainable: its forward passes produce
plain constants and its parameters cannot receive gradients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import (
    AugmentationError,
    CapabilityError,
    ConfigurationError,
    DataError,
    ParameterError,
    ShapeError,
    SubsampleError,
)
from .losses import LossWeights, loss_align, loss_ce, loss_corr, loss_kd, loss_sup, loss_total
from .networks import (
    ArchSpec,
    Checkpoint,
    Network,
    forward_features,
    forward_logits,
    make_linear_head,
    make_transform_head,
)
from .tensor import GradTape, Tensor, concat_rows, l2_normalize_rows, mul, add

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,lr,align,corr,sup,ce,kd,total,train_acc,eval_acc,seconds"

# fixed offsets deriving head seeds from the run seed
_ALIGN_SEED_OFFSET = 101
_CORR_SEED_OFFSET = 202
_SUP_SEED_OFFSET = 303


@dataclass
class DistillConfig:
    """All hyperparameters of one training run."""

    seed: int = 0
    epochs: int = 240
    batch_size: int = 64
    initial_lr: float = 0.05
    lr_decay_epochs: tuple = (150, 180, 210)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    transform_multiplier: float = 16.0
    teacher_kind: str = "supervised"
    few_shot_fraction: float = 1.0
    teacher_arch: ArchSpec | None = None
    student_arch: ArchSpec | None = None
    dataset_paths: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.initial_lr <= 0 or self.lr_decay_factor <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not (0.0 < self.few_shot_fraction <= 1.0):
            raise ConfigurationError(
                f"few_shot_fraction must lie in (0, 1], got {self.few_shot_fraction}")
        if self.teacher_kind not in ("supervised", "feature_only"):
            raise ConfigurationError(f"unknown teacher_kind {self.teacher_kind!r}")
        if self.transform_multiplier <= 0:
            raise ConfigurationError("transform_multiplier must be positive")
        self.weights.validate()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    align: float
    corr: float
    sup: float
    ce: float
    kd: float
    total: float
    train_acc: float
    eval_acc: float
    seconds: float


@dataclass
class TrainLog:
    """One record per completed epoch, persisted as CSV with a fixed header."""

    records: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(LOG_HEADER + "\n")
            for r in self.records:
                fields = [str(r.epoch)] + [
                    f"{v:.17g}" for v in (
                        r.lr, r.align, r.corr, r.sup, r.ce, r.kd, r.total,
                        r.train_acc, r.eval_acc, r.seconds)
                ]
                fh.write(",".join(fields) + "\n")

    @staticmethod
    def from_csv(path) -> "TrainLog":
        log = TrainLog()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != LOG_HEADER:
                raise DataError(f"unexpected train log header: {header!r}")
            for line in fh:
                parts = line.strip().split(",")
                log.records.append(EpochRecord(
                    epoch=int(parts[0]),
                    **dict(zip(
                        ("lr", "align", "corr", "sup", "ce", "kd", "total",
                         "train_acc", "eval_acc", "seconds"),
                        (float(p) for p in parts[1:])))))
        return log


def sgd_step(params, grads, lr: float, momentum: float, weight_decay: float,
             velocity=None):
    """One SGD-with-momentum update; returns (new_params, new_velocity).

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
    """
    if lr <= 0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError(
            f"params/grads shapes differ: {[p.shape for p in params]} vs "
            f"{[g.shape for g in grads]}")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_velocity, new_params = [], []
    for p, g, v in zip(params, grads, velocity):
        v_new = momentum * v + (g + weight_decay * p)
        new_velocity.append(v_new)
        new_params.append(p - lr * v_new)
    return new_params, new_velocity


def lr_schedule(epoch: int, config: DistillConfig) -> float:
    """Step decay: initial rate times factor^(decay epochs reached)."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    decays = sum(1 for d in config.lr_decay_epochs if d <= epoch)
    return config.initial_lr * config.lr_decay_factor ** decays


# -- augmentation ---------------------------------------------------------


@dataclass
class AugmentResult:
    """Augmented views plus the geometry needed to relate them to the originals."""

    views: np.ndarray
    quarter_turns: np.ndarray | None   # per-sample k in {0,1,2,3}, images only
    overlap_mask: np.ndarray           # bool, per-sample spatial shape


def rotate_quarter(images: np.ndarray, turns) -> np.ndarray:
    """Rotate each (…, H, W) image by its own multiple of 90 degrees."""
    turns = np.broadcast_to(np.asarray(turns), images.shape[:1])
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = np.rot90(images[i], k=int(turns[i]) % 4, axes=(-2, -1))
    return out


def augment(batch: np.ndarray, seed: int) -> AugmentResult:
    """One augmented view per sample.

    Image batches (N x C x H x W, square) get a uniformly drawn right-angle
    rotation; every pixel survives a pure rotation, so the overlap mask is
    all-true.  Flat batches get additive Gaussian jitter with sigma equal to
    0.05 times the per-feature standard deviation.
    """
    batch = np.asarray(batch)
    rng = np.random.default_rng(seed)
    if batch.ndim == 4:
        if batch.shape[-1] != batch.shape[-2]:
            raise AugmentationError(
                f"rotation needs square spatial input, got {batch.shape[-2]}x{batch.shape[-1]}")
        turns = rng.integers(0, 4, size=batch.shape[0])
        views = rotate_quarter(batch, turns)
        mask = np.ones((batch.shape[0],) + batch.shape[2:], dtype=bool)
        return AugmentResult(views=views, quarter_turns=turns, overlap_mask=mask)
    if batch.ndim == 2:
        sigma = 0.05 * batch.std(axis=0)
        views = batch + rng.standard_normal(batch.shape) * sigma
        mask = np.ones(batch.shape, dtype=bool)
        return AugmentResult(views=views.astype(batch.dtype, copy=False),
                             quarter_turns=None, overlap_mask=mask)
    raise AugmentationError(f"unsupported batch rank {batch.ndim} for augmentation")


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified subset without replacement; fraction 1.0 is the identity."""
    if not (0.0 < fraction <= 1.0):
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset.take(np.arange(len(dataset)))
    rng = np.random.default_rng(seed)
    if dataset.labels is None:
        count = int(round(fraction * len(dataset)))
        if count == 0:
            raise SubsampleError(f"fraction {fraction} selects no samples")
        picked = np.sort(rng.choice(len(dataset), size=count, replace=False))
        return dataset.take(picked)
    chosen = []
    for c in range(dataset.class_count):
        indices = np.where(dataset.labels == c)[0]
        if indices.size == 0:
            continue
        count = int(round(fraction * indices.size))
        if count == 0:
            raise SubsampleError(
                f"fraction {fraction} empties class {c} ({indices.size} samples)")
        chosen.append(rng.choice(indices, size=count, replace=False))
    return dataset.take(np.sort(np.concatenate(chosen)))


# -- the shared training engine -------------------------------------------


def _accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _evaluate(net: Network, dataset: Dataset) -> float:
    if dataset.labels is None or not net.has_projection:
        return float("nan")
    net.set_trainable(False)
    feats = forward_features(net, dataset.flat_inputs())
    logits = forward_logits(net, feats)
    net.set_trainable(True)
    return _accuracy_from_logits(logits.data, dataset.labels)


def _run_training(config: DistillConfig, arch: ArchSpec, train: Dataset,
                  eval_ds: Dataset | None,
                  teacher: Network | None) -> tuple[Checkpoint, TrainLog]:
    from .networks import init_network

    config.validate()
    if len(train) == 0:
        raise DataError("training dataset is empty")
    inputs = train.flat_inputs()
    labels = train.labels
    raw = train.inputs
    n = len(train)
    w = config.weights
    supervised = config.teacher_kind == "supervised"

    if teacher is None:
        active = {"ce"}
    else:
        active = set()
        if w.lambda1 > 0:
            active.add("align")
        if w.lambda2 > 0:
            active.add("corr")
        if w.w_sup > 0:
            active.add("sup")
        if w.w_ce > 0:
            active.add("ce")
        if w.w_kd > 0:
            active.add("kd")
        if not supervised and active & {"sup", "ce", "kd"}:
            raise CapabilityError(
                "sup/ce/kd losses require a supervised teacher")
        if "kd" in active and not teacher.has_projection:
            raise CapabilityError("kd loss requires a teacher with logits")

    if ("ce" in active or "sup" in active) and labels is None:
        raise DataError("labeled dataset required for supervised terms")
    if arch.classes is None and "ce" in active:
        raise CapabilityError("cross-entropy requires a network with a projection")

    net = init_network(arch, config.seed)
    if teacher is not None:
        if teacher.spec.input_dim != arch.input_dim:
            raise ConfigurationError(
                f"teacher input width {teacher.spec.input_dim} differs from "
                f"student input width {arch.input_dim}")
    if inputs.shape[1] != arch.input_dim:
        raise ConfigurationError(
            f"dataset width {inputs.shape[1]} differs from network input "
            f"{arch.input_dim}")

    align_head = corr_head = sup_head = None
    if "align" in active:
        align_head = make_transform_head(arch.feature_dim, teacher.feature_dim,
                                         config.transform_multiplier,
                                         config.seed + _ALIGN_SEED_OFFSET)
    if "corr" in active:
        corr_head = make_transform_head(arch.feature_dim, arch.feature_dim, 1.0,
                                        config.seed + _CORR_SEED_OFFSET)
    if "sup" in active:
        sup_head = make_linear_head(arch.feature_dim, teacher.feature_dim,
                                    config.seed + _SUP_SEED_OFFSET)

    params = net.parameters()
    for head in (align_head, corr_head, sup_head):
        if head is not None:
            params.extend(head.parameters())
    velocity = None

    log = TrainLog()
    skipped_small = False
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = np.random.default_rng(config.seed + epoch).permutation(n)
        aug_seed = (config.seed * 1_000_003 + epoch) % (2 ** 63)

        sums = {k: 0.0 for k in ("align", "corr", "sup", "ce", "kd", "total")}
        seen = 0
        correct = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if "corr" in active and idx.size < 2:
                if not skipped_small:
                    logger.info("skipping trailing batch of size %d (correlation needs >= 2)", idx.size)
                    skipped_small = True
                continue
            x = Tensor(inputs[idx])
            y = labels[idx] if labels is not None else None

            z_s = forward_features(net, x)
            z_t = forward_features(teacher, x) if teacher is not None else None
            logits_s = forward_logits(net, z_s) if ("ce" in active or "kd" in active) else None

            term_align = term_corr = term_sup = term_ce = term_kd = None
            if "align" in active:
                term_align = loss_align(z_s, z_t, align_head)
            if "corr" in active:
                aug = augment(raw[idx], aug_seed + start)
                x_aug = Tensor(aug.views.reshape(idx.size, -1).astype(np.float64))
                z_t_anchor = forward_features(teacher, x_aug)
                z_s_anchor = forward_features(net, x_aug)
                term_corr = loss_corr(z_t_anchor, z_t,
                                      corr_head.forward(z_s_anchor),
                                      corr_head.forward(z_s), w.tau_corr)
            if "sup" in active:
                t_n = l2_normalize_rows(z_t)
                p_s = l2_normalize_rows(sup_head.forward(z_s))
                y2 = np.concatenate([y, y])
                sup_t = loss_sup(t_n, concat_rows([t_n, p_s]), y2, w.tau_sup, "teacher")
                sup_s = loss_sup(p_s, concat_rows([p_s, t_n]), y2, w.tau_sup, "student")
                term_sup = mul(add(sup_t, sup_s), 0.5)
            if "ce" in active:
                term_ce = loss_ce(logits_s, y)
            if "kd" in active:
                logits_t = forward_logits(teacher, z_t)
                term_kd = loss_kd(logits_t, logits_s, w.kd_temperature)

            breakdown = loss_total(w, config.teacher_kind if teacher is not None else "supervised",
                                   align=term_align, corr=term_corr,
                                   sup=term_sup, ce=term_ce, kd=term_kd)
            grads = GradTape(breakdown.tensor).gradients(params)
            new_data, velocity = sgd_step([p.data for p in params], grads, lr,
                                          config.momentum, config.weight_decay,
                                          velocity)
            for p, d in zip(params, new_data):
                p.data = d

            seen += idx.size
            for key in ("align", "corr", "sup", "ce", "kd", "total"):
                sums[key] += getattr(breakdown, key) * idx.size
            if logits_s is not None and y is not None:
                correct += _accuracy_from_logits(logits_s.data, y) * idx.size

        denom = max(seen, 1)
        train_acc = correct / denom if (labels is not None and net.has_projection
                                        and ("ce" in active or "kd" in active)) else float("nan")
        eval_acc = _evaluate(net, eval_ds) if eval_ds is not None else float("nan")
        log.records.append(EpochRecord(
            epoch=epoch, lr=lr,
            align=sums["align"] / denom, corr=sums["corr"] / denom,
            sup=sums["sup"] / denom, ce=sums["ce"] / denom,
            kd=sums["kd"] / denom, total=sums["total"] / denom,
            train_acc=train_acc, eval_acc=eval_acc,
            seconds=time.perf_counter() - t0))

    ckpt = Checkpoint.from_network(net, seed=config.seed, epochs=config.epochs)
    return ckpt, log


def pretrain_teacher(config: DistillConfig, dataset: Dataset,
                     eval_dataset: Dataset | None = None,
                     arch: ArchSpec | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train a network from scratch with cross-entropy only."""
    arch = arch or config.teacher_arch
    if arch is None:
        raise ConfigurationError("pretraining needs an architecture (teacher_arch)")
    if dataset.labels is None:
        raise DataError("supervised pretraining needs a labeled dataset")
    return _run_training(config, arch, dataset, eval_dataset, teacher=None)


def distill(config: DistillConfig, teacher: Checkpoint, dataset: Dataset,
            eval_dataset: Dataset | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train a student under the weighted multi-term objective.

    The transform heads are trained jointly with the student and discarded
    here: the returned checkpoint holds the student network only, and
    evaluation uses raw student features/logits.
    """
    config.validate()
    if config.student_arch is None:
        raise ConfigurationError("distillation needs student_arch")
    teacher_net = teacher.to_network(trainable=False)
    if config.teacher_kind == "supervised" and not teacher_net.has_projection:
        raise CapabilityError(
            "teacher_kind 'supervised' requires a teacher with a class projection")
    if config.few_shot_fraction < 1.0:
        dataset = subsample(dataset, config.few_shot_fraction, config.seed)
    return _run_training(config, config.student_arch, dataset, eval_dataset,
                         teacher=teacher_net)

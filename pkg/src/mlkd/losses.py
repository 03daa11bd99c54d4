"""Distillation objectives and their weighted combination.

Five scalar objectives, all reduced with a mean over the batch:

  * ``loss_kd``     soft cross-entropy between temperature-softened logits;
  * ``loss_align``  squared L2 between the transformed student feature and
                    the teacher feature of the same sample;
  * ``loss_corr``   KL between softmaxed batch-similarity rows of teacher
                    and student (cross-sample relational structure);
  * ``loss_sup``    label-driven contrastive term over a bank holding both
                    networks' representations;
  * ``loss_ce``     plain cross-entropy against the true labels.

The teacher is the target in every term: its tensors are detached inside
each loss, so no gradient ever reaches teacher parameters.  The total is a
weighted sum; feature-only teachers support only alignment + correlation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ContractError, DegenerateInputError, LabelError, ParameterError, ShapeError
from .networks import TransformHead
from .tensor import (
    Tensor,
    as_tensor,
    cosine_similarity_matrix,
    exp,
    kl_divergence_rows,
    log,
    log_softmax_rows,
    mul,
    neg,
    softmax_rows,
    square,
    sub,
    tmean,
    tsum,
)

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Balancing weights and temperatures for the total objective.

    The alignment/correlation weights reflect the relative magnitude of the
    two terms; the supervised term uses the usual contrastive temperature
    0.07 while correlation softens with 0.5.  ``w_kd`` defaults to zero:
    the softened-logits term is a baseline, not part of the standard total.
    """

    lambda1: float = 10.0      # alignment
    lambda2: float = 20.0      # correlation
    w_sup: float = 0.5         # supervised contrastive
    w_ce: float = 1.0          # cross-entropy
    w_kd: float = 0.0          # softened-logits baseline term
    tau_corr: float = 0.5
    tau_sup: float = 0.07
    kd_temperature: float = 4.0

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "w_sup", "w_ce", "w_kd"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("tau_corr", "tau_sup", "kd_temperature"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    """Per-term scalar values plus the weighted total.

    ``tensor`` carries the graph node of the total for backpropagation;
    absent terms are recorded as 0.0 with zero effective weight.
    """

    align: float = 0.0
    corr: float = 0.0
    sup: float = 0.0
    ce: float = 0.0
    kd: float = 0.0
    total: float = 0.0
    tensor: Tensor | None = None


def _scalar(value) -> Tensor:
    t = as_tensor(value)
    if t.data.size != 1:
        raise ContractError(f"expected a scalar loss term, got shape {t.shape}")
    return t


def loss_kd(logits_t: Tensor, logits_s: Tensor, temperature: float) -> Tensor:
    """Soft cross-entropy between temperature-softened class distributions.

    The teacher distribution is a constant target; at equal logits the value
    is the entropy of the softened teacher distribution.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    logits_t, logits_s = as_tensor(logits_t), as_tensor(logits_s)
    if logits_t.shape != logits_s.shape:
        raise ShapeError(f"logit shapes differ: {logits_t.shape} vs {logits_s.shape}")
    p_t = softmax_rows(logits_t.detach(), tau=temperature)
    log_q = log_softmax_rows(logits_s, tau=temperature)
    return neg(tmean(tsum(mul(p_t, log_q), axis=1)))


def kd_alignment_decomposition(logits_t: Tensor, logits_s: Tensor,
                               aligned_logits: Tensor,
                               temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """Split the soft cross-entropy into an alignment part and a residual.

    With p = softmax(logits_t), a = softmax(aligned_logits), q = softmax(logits_s):

        term1 = -mean_i sum_k p_ik log a_ik
        term2 =  mean_i sum_k p_ik log (a_ik / q_ik)

    term1 + term2 equals ``loss_kd`` at the same temperature.  When the
    aligned logits equal the teacher logits, term1 is the teacher
    distribution's own entropy and term2 is KL(p || q).
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    logits_t = as_tensor(logits_t)
    if logits_t.shape != as_tensor(logits_s).shape or logits_t.shape != as_tensor(aligned_logits).shape:
        raise ShapeError("decomposition requires three equal N x K logit tensors")
    p_t = softmax_rows(logits_t.detach(), tau=temperature)
    log_a = log_softmax_rows(aligned_logits, tau=temperature)
    log_q = log_softmax_rows(logits_s, tau=temperature)
    term1 = neg(tmean(tsum(mul(p_t, log_a), axis=1)))
    term2 = tmean(tsum(mul(p_t, sub(log_a, log_q)), axis=1))
    return term1, term2


def loss_align(z_s: Tensor, z_t: Tensor, head: TransformHead) -> Tensor:
    """Mean squared L2 distance between transformed student and teacher features."""
    z_s, z_t = as_tensor(z_s), as_tensor(z_t)
    if z_s.data.ndim != 2 or z_t.data.ndim != 2 or z_s.shape[0] != z_t.shape[0]:
        raise ShapeError(f"feature batches disagree: {z_s.shape} vs {z_t.shape}")
    if head.input_dim != z_s.shape[1] or head.output_dim != z_t.shape[1]:
        raise ShapeError(
            f"head maps {head.input_dim}->{head.output_dim}, features are "
            f"{z_s.shape[1]}->{z_t.shape[1]}"
        )
    diff = sub(head.forward(z_s), z_t.detach())
    return tmean(tsum(square(diff), axis=1))


def loss_corr(z_t_anchor: Tensor, z_t: Tensor,
              z_s_anchor: Tensor, z_s_transformed: Tensor, tau: float) -> Tensor:
    """KL between teacher and student batch-similarity distributions.

    Anchors are representations of augmented views; each anchor's cosine
    similarities to the whole batch (its own source sample included) are
    softened into a distribution, and the student distribution is pulled
    toward the teacher's.  Cosine similarity makes the value invariant to
    positive per-sample rescaling on either side.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    z_t_anchor, z_t = as_tensor(z_t_anchor), as_tensor(z_t)
    z_s_anchor, z_s_transformed = as_tensor(z_s_anchor), as_tensor(z_s_transformed)
    n = z_t_anchor.shape[0]
    if n < 2:
        raise DegenerateInputError(f"correlation needs a batch of at least 2, got {n}")
    if z_t.shape[0] != n or z_s_anchor.shape[0] != n or z_s_transformed.shape[0] != n:
        raise ShapeError("anchor and batch representations must share the batch size")
    sim_t = cosine_similarity_matrix(z_t_anchor.detach(), z_t.detach())
    sim_s = cosine_similarity_matrix(z_s_anchor, z_s_transformed)
    p = softmax_rows(sim_t, tau=tau)
    q = softmax_rows(sim_s, tau=tau)
    return kl_divergence_rows(p.detach(), q)


def loss_sup(z_anchor: Tensor, z_bank: Tensor, labels, tau: float,
             anchor_mode: str) -> Tensor:
    """Label-driven contrastive distillation over a two-network bank.

    Convention: ``z_bank`` holds 2N unit-normalized rows where row i
    (i < N) is anchor i's own copy and the second half is the other
    network's representations; ``labels`` follows the bank.  For anchor i,
    every other bank row with the same label is a positive and the anchor's
    own row is excluded everywhere.  Each anchor's log-ratio sum is divided
    by its positive count (2 * class-count-in-batch - 1 under the standard
    construction) and the result is averaged over anchors.

    ``anchor_mode`` names which network supplied the anchors.  Anchors are
    detached in teacher mode; in student mode the caller's teacher half of
    the bank must already be constant (frozen-network outputs are).  An
    anchor whose class has no positive contributes zero and is logged.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if anchor_mode not in ("teacher", "student"):
        raise ParameterError(f"anchor_mode must be 'teacher' or 'student', got {anchor_mode!r}")
    z_anchor, z_bank = as_tensor(z_anchor), as_tensor(z_bank)
    labels = np.asarray(labels, dtype=np.int64)
    n = z_anchor.shape[0]
    if z_bank.data.ndim != 2 or z_bank.shape[0] != 2 * n or z_bank.shape[1] != z_anchor.shape[1]:
        raise ShapeError(
            f"bank must be (2N x D) for anchors {z_anchor.shape}, got {z_bank.shape}"
        )
    if labels.shape != (2 * n,):
        raise ShapeError(f"labels must have length 2N={2 * n}, got {labels.shape}")
    for name, t in (("anchors", z_anchor), ("bank", z_bank)):
        norms = np.linalg.norm(t.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ContractError(
                f"{name} must be unit-normalized; row {worst} has norm {norms[worst]:.6f}"
            )

    if anchor_mode == "teacher":
        z_anchor = z_anchor.detach()

    sims = mul(z_anchor @ z_bank.T, 1.0 / tau)              # N x 2N

    not_self = np.ones((n, 2 * n))
    not_self[np.arange(n), np.arange(n)] = 0.0
    positives = (labels[None, :] == labels[:n, None]).astype(np.float64) * not_self
    counts = positives.sum(axis=1)
    missing = np.where(counts == 0)[0]
    if missing.size:
        logger.warning(
            "supervised contrastive loss: %d anchor(s) without positives "
            "contribute zero (first index %d)", missing.size, int(missing[0]))
    weights = np.zeros_like(positives)
    has_pos = counts > 0
    weights[has_pos] = positives[has_pos] / counts[has_pos, None]

    shift = Tensor(sims.data.max(axis=1, keepdims=True))    # constant
    masked_exp = mul(exp(sub(sims, shift)), Tensor(not_self))
    log_denom = log(tsum(masked_exp, axis=1, keepdims=True)) + shift
    log_prob = sub(sims, log_denom)                         # N x 2N
    per_anchor = tsum(mul(Tensor(weights), log_prob), axis=1)
    return neg(tmean(per_anchor))


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have length {n}, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise LabelError(f"label {bad} outside [0, {k})")
    one_hot = np.zeros((n, k))
    one_hot[np.arange(n), labels] = 1.0
    return neg(tmean(tsum(mul(Tensor(one_hot), log_softmax_rows(logits)), axis=1)))


def loss_total(weights: LossWeights, teacher_kind: str,
               align=None, corr=None, sup=None, ce=None, kd=None) -> LossBreakdown:
    """Weighted combination of whatever terms were computed.

    Feature-only teachers admit only alignment and correlation; passing a
    supervised term (sup/ce/kd) for one raises ``CapabilityError``.  Terms
    left as None contribute nothing and are recorded as 0.
    """
    weights.validate()
    if teacher_kind not in ("supervised", "feature_only"):
        raise ParameterError(f"teacher_kind must be 'supervised' or 'feature_only', got {teacher_kind!r}")
    if teacher_kind == "feature_only" and any(t is not None for t in (sup, ce, kd)):
        raise CapabilityError(
            "supervised terms (sup/ce/kd) require a supervised teacher"
        )
    pairs = [
        ("align", align, weights.lambda1),
        ("corr", corr, weights.lambda2),
        ("sup", sup, weights.w_sup),
        ("ce", ce, weights.w_ce),
        ("kd", kd, weights.w_kd),
    ]
    breakdown = LossBreakdown()
    total: Tensor | None = None
    total_value = 0.0
    for name, term, weight in pairs:
        if term is None:
            continue
        term = _scalar(term)
        setattr(breakdown, name, term.item())
        total_value += weight * term.item()
        weighted = mul(term, weight)
        total = weighted if total is None else total + weighted
    breakdown.total = total_value
    breakdown.tensor = total if total is not None else Tensor(0.0)
    return breakdown

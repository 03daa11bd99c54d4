"""Multi-level knowledge distillation toolkit.

A desk-scale library for distilling small teacher networks into smaller
students via feature alignment, cross-sample relational matching, and
label-driven contrastive terms, plus the metrics used to inspect what a
trained representation actually retained (accuracy, k-NN, linear probes,
CKA, and perturbation-based entropy maps).

Everything runs on a small numpy-backed tensor core with reverse-mode
gradients that are verifiable against finite differences.
"""

import os

# BLAS thread caps must be in place before numpy initializes its backend.
# MLKD_THREADS defaults to 1 so repeated runs are bit-for-bit identical.
_threads = os.environ.get("MLKD_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

from . import errors
from .tensor import (
    Tensor,
    GradTape,
    grad,
    finite_diff_check,
    softmax_rows,
    log_softmax_rows,
    cosine_similarity_matrix,
    kl_divergence_rows,
    l2_normalize_rows,
    concat_rows,
)
from .networks import (
    ArchSpec,
    Network,
    TransformHead,
    LinearHead,
    Checkpoint,
    init_network,
    forward_features,
    forward_logits,
    make_transform_head,
    make_linear_head,
)
from .losses import (
    LossWeights,
    LossBreakdown,
    loss_kd,
    kd_alignment_decomposition,
    loss_align,
    loss_corr,
    loss_sup,
    loss_ce,
    loss_total,
)
from .data import Dataset, GeneratorSpec, generate_synthetic, save_dataset, load_dataset, split
from .training import (
    DistillConfig,
    TrainLog,
    sgd_step,
    lr_schedule,
    augment,
    pretrain_teacher,
    distill,
    subsample,
)
from .evaluation import (
    EvalReport,
    ProbeConfig,
    top1_accuracy,
    topk_accuracy,
    knn_classify,
    linear_probe,
    cka_similarity,
    export_features,
)
from .quantification import (
    EntropyConfig,
    EntropyMap,
    estimate_pixel_entropy,
    entropy_from_sigma,
    map_from_sigma,
    average_entropy,
    iou_consistency,
    view_consistency,
)
from .infobound import (
    PairSample,
    info_nce_multi_positive,
    mi_lower_bound,
    align_cosine_identity_check,
    gaussian_mi,
    make_gaussian_critic,
    sample_gaussian_pairs,
)

__version__ = "0.1.0"

"""Mutual-information lower bound and the contrastive identities behind it.

A binary indicator distinguishes pairs drawn jointly (positives) from
pairs drawn as a product of marginals (negatives).  With class priors
matching the sample counts, the mutual information between the two sides
is bounded below by

    I(T; S) >= log(N_n / N_p) + E_positive[ log q(C=1 | T, S) ]

where q is the posterior probability a pair is a positive.  On synthetic
distributions the posterior is tractable through the known density ratio,
which makes the bound directly checkable against analytic MI values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ParameterError

LOG_CLAMP = 1e-12


@dataclass
class PairSample:
    """One (teacher, student) representation pair with its origin indicator."""

    t: np.ndarray
    s: np.ndarray
    c: int   # 1 = drawn jointly (positive), 0 = product of marginals (negative)

    def __post_init__(self):
        if self.c not in (0, 1):
            raise ParameterError(f"indicator must be 0 or 1, got {self.c}")


def info_nce_multi_positive(anchor: np.ndarray, positives: Sequence[np.ndarray],
                            negatives: Sequence[np.ndarray], tau: float) -> float:
    """Contrastive loss of an anchor against several positives.

    Mean over positives m of
        -log( exp(a.p_m / tau) / (exp(a.p_m / tau) + sum_k exp(a.n_k / tau)) ).
    All vectors must be unit length.  With one positive this is exactly the
    single-pair term; it is symmetric under permuting the negatives.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if not positives or not negatives:
        raise ParameterError("need at least one positive and one negative")
    anchor = np.asarray(anchor, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    for name, arr in (("anchor", anchor[None]), ("positives", pos), ("negatives", neg)):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError(f"{name} must be unit-normalized")

    pos_logits = pos @ anchor / tau
    neg_logits = neg @ anchor / tau
    # stable log-sum-exp of the negative pool, shared by every positive
    m = max(float(np.max(neg_logits)), float(np.max(pos_logits)))
    neg_sum = np.sum(np.exp(neg_logits - m))
    losses = -(pos_logits - m - np.log(np.exp(pos_logits - m) + neg_sum))
    return float(np.mean(losses))


def mi_lower_bound(samples: Sequence[PairSample],
                   critic: Callable[[np.ndarray, np.ndarray], float]) -> float:
    """Evaluate the contrastive MI bound on labeled pair samples.

    ``critic(t, s)`` must estimate the posterior q(C=1 | t, s) under the
    prior implied by the sample counts.  The bound is
    log(N_n / N_p) plus the mean log-posterior over positives, with logs
    clamped at 1e-12.
    """
    n_pos = sum(1 for s in samples if s.c == 1)
    n_neg = sum(1 for s in samples if s.c == 0)
    if n_pos == 0 or n_neg == 0:
        raise ParameterError(
            f"need both positives and negatives, got {n_pos} and {n_neg}")
    log_posts = [
        np.log(max(float(critic(s.t, s.s)), LOG_CLAMP))
        for s in samples if s.c == 1
    ]
    return float(np.log(n_neg / n_pos) + np.mean(log_posts))


def align_cosine_identity_check(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """Evaluate both sides of the unit-vector identity -a.b = ||a-b||^2/2 - 1.

    Returns (lhs, rhs, |lhs - rhs|); the gap is zero up to rounding for any
    pair of unit vectors, which ties the cosine objective to the squared-L2
    alignment objective.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for name, v in (("a", a), ("b", b)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-10:
            raise ContractError(f"{name} must be a unit vector")
    lhs = -float(a @ b)
    rhs = 0.5 * float(np.sum((a - b) ** 2)) - 1.0
    return lhs, rhs, abs(lhs - rhs)


# -- tractable Gaussian verification -----------------------------------------


def gaussian_mi(rho: float) -> float:
    """Analytic MI of a bivariate unit Gaussian with correlation rho."""
    if not (-1.0 < rho < 1.0):
        raise ParameterError(f"rho must lie in (-1, 1), got {rho}")
    return -0.5 * np.log(1.0 - rho * rho)


def sample_gaussian_pairs(rho: float, n_pos: int, n_neg: int,
                          seed: int = 0) -> list[PairSample]:
    """Positives from the correlated joint, negatives from shuffled marginals."""
    if n_pos < 1 or n_neg < 1:
        raise ParameterError("need at least one positive and one negative")
    rng = np.random.default_rng(seed)
    cov = np.array([[1.0, rho], [rho, 1.0]])
    joint = rng.multivariate_normal([0.0, 0.0], cov, size=n_pos)
    t_marg = rng.standard_normal(n_neg)
    s_marg = rng.standard_normal(n_neg)
    samples = [PairSample(t=np.array([t]), s=np.array([s]), c=1) for t, s in joint]
    samples += [PairSample(t=np.array([t]), s=np.array([s]), c=0)
                for t, s in zip(t_marg, s_marg)]
    return samples


def make_gaussian_critic(rho: float, n_pos: int, n_neg: int) -> Callable[[np.ndarray, np.ndarray], float]:
    """Posterior q(C=1 | t, s) from the known Gaussian density ratio.

    q = r / (r + N_n/N_p) with r = p(t, s) / (p(t) p(s)); for the bivariate
    unit Gaussian,
        log r = -0.5 log(1 - rho^2) - (rho^2 t^2 - 2 rho t s + rho^2 s^2) / (2 (1 - rho^2)).
    """
    if not (-1.0 < rho < 1.0):
        raise ParameterError(f"rho must lie in (-1, 1), got {rho}")
    ratio = n_neg / n_pos
    one_minus = 1.0 - rho * rho

    def critic(t: np.ndarray, s: np.ndarray) -> float:
        tv, sv = float(np.ravel(t)[0]), float(np.ravel(s)[0])
        log_r = (-0.5 * np.log(one_minus)
                 - (rho * rho * tv * tv - 2.0 * rho * tv * sv + rho * rho * sv * sv)
                 / (2.0 * one_minus))
        r = np.exp(log_r)
        return float(r / (r + ratio))

    return critic

"""Perturbation-based knowledge quantification.

How much of the input does a representation actually use?  Perturb the
input with independent per-pixel Gaussian noise and learn the largest
noise scales the representation tolerates: pixels that tolerate little
noise carry information the network keeps (low conditional entropy), and
pixels that tolerate a lot were discarded (high entropy).

The per-pixel entropy is ``H_i = log(sigma_i) + 0.5 log(2 pi e)``.  Noise
scales are learned by maximizing total entropy under a soft distortion
budget: maximize ``sum_i log sigma_i - beta * max(0, E||f(x~) - f(x)||^2 - eps)``
with the expectation estimated from a fixed number of Monte-Carlo draws per
ascent step.  Pixels with below-average entropy form the concept mask, and
the IoU of two views' concept masks measures how consistently the network
reads the same input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .networks import Network, forward_features
from .tensor import GradTape, Tensor, log, mul, relu, softplus, square, sub, tmean, tsum
from .training import rotate_quarter

logger = logging.getLogger(__name__)

HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass
class EntropyConfig:
    """Knobs of the noise-scale estimator; every value is a choice, not a law.

    ``epsilon`` overrides the distortion budget; when None it defaults to
    ``epsilon_scale`` times the squared feature norm of the clean input.
    The final sigma is the average over the trailing ``tail_fraction`` of
    ascent steps, which smooths the oscillation around the budget boundary.
    """

    draws: int = 8
    steps: int = 200
    beta: float = 100.0
    epsilon: float | None = None
    epsilon_scale: float = 0.05
    step_size: float = 0.01
    sigma_init_scale: float = 0.1
    sigma_cap_scale: float = 10.0
    sigma_floor_scale: float = 1e-5
    tail_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.draws < 1 or self.steps < 1:
            raise ParameterError("draws and steps must be positive")
        if self.beta < 0 or self.step_size <= 0:
            raise ParameterError("beta must be >= 0 and step_size > 0")
        if not (0.0 < self.tail_fraction <= 1.0):
            raise ParameterError("tail_fraction must lie in (0, 1]")
        if self.epsilon is not None and self.epsilon < 0:
            raise ParameterError("epsilon must be nonnegative")


@dataclass
class EntropyMap:
    """Per-pixel noise tolerance and the entropy values derived from it."""

    sigma: np.ndarray          # per-pixel learned noise scale, input shape
    entropy: np.ndarray        # H_i = log sigma_i + 0.5 log(2 pi e)
    mean_entropy: float
    concept_mask: np.ndarray   # bool: mean_entropy > H_i (strictly)
    epsilon: float
    distortion: float          # E||f(x~) - f(x)||^2 at the final sigma
    warning: bool              # distortion exceeded the budget by > 2 eps
    config: EntropyConfig = field(repr=False, default_factory=EntropyConfig)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    # log(e^y - 1), stable for small y via expm1
    return np.log(np.expm1(y))


def entropy_from_sigma(sigma: np.ndarray) -> np.ndarray:
    """Per-pixel entropy of independent Gaussian noise scales."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ParameterError("sigma must be positive everywhere")
    return np.log(sigma) + HALF_LOG_2PIE


def map_from_sigma(sigma: np.ndarray, epsilon: float = 0.0,
                   distortion: float = 0.0) -> EntropyMap:
    """Assemble an ``EntropyMap`` from externally chosen noise scales.

    Useful for fixed-sigma baselines and for tests that bypass the
    optimizer; the derived fields follow the same definitions as
    ``estimate_pixel_entropy``.
    """
    entropy = entropy_from_sigma(sigma)
    mean_entropy = float(entropy.mean())
    mask = mean_entropy > entropy
    if mask.all():
        mask[:] = False
    return EntropyMap(sigma=np.asarray(sigma, dtype=np.float64), entropy=entropy,
                      mean_entropy=mean_entropy, concept_mask=mask,
                      epsilon=float(epsilon), distortion=float(distortion),
                      warning=False)


def estimate_pixel_entropy(net: Network, image: np.ndarray,
                           cfg: EntropyConfig | None = None) -> EntropyMap:
    """Learn per-pixel noise scales for one input and derive its entropy map.

    The network is treated as frozen.  Noise scales are parameterized as
    softplus of an unconstrained variable, initialized at
    ``sigma_init_scale`` times the input's standard deviation and capped at
    ``sigma_cap_scale`` times it (the cap is what stops runaway growth when
    the representation ignores a pixel entirely).  Each ascent step draws
    its noise from one deterministic stream, so the whole estimate is a
    pure function of (net, image, cfg).
    """
    cfg = cfg or EntropyConfig()
    cfg.validate()
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ParameterError("image must be finite")
    shape = image.shape
    flat = image.reshape(1, -1)
    n_pixels = flat.shape[1]

    was_trainable = any(p.requires_grad for p in net.parameters())
    net.set_trainable(False)
    try:
        f0 = forward_features(net, flat).data          # 1 x D, constant
        epsilon = cfg.epsilon if cfg.epsilon is not None \
            else cfg.epsilon_scale * float(np.sum(f0 * f0))

        std = max(float(image.std()), 1e-6)
        sigma_cap = cfg.sigma_cap_scale * std
        rho_cap = _inverse_softplus(np.array(sigma_cap))
        rho_floor = _inverse_softplus(np.array(cfg.sigma_floor_scale * std))
        rho = np.full((1, n_pixels), _inverse_softplus(np.array(cfg.sigma_init_scale * std)))

        rng = np.random.default_rng(cfg.seed)
        tail = max(1, int(round(cfg.tail_fraction * cfg.steps)))
        history = []
        x_const = Tensor(flat)
        for step in range(cfg.steps):
            noise = Tensor(rng.standard_normal((cfg.draws, n_pixels)))
            rho_t = Tensor(rho, requires_grad=True)
            sigma_t = softplus(rho_t)
            perturbed = x_const + mul(sigma_t, noise)
            diff = sub(forward_features(net, perturbed), Tensor(f0))
            distortion = tmean(tsum(square(diff), axis=1))
            objective = sub(tsum(log(sigma_t)),
                            mul(relu(sub(distortion, epsilon)), cfg.beta))
            (g,) = GradTape(objective).gradients([rho_t])
            rho = np.clip(rho + cfg.step_size * g, rho_floor, rho_cap)
            if step >= cfg.steps - tail:
                history.append(np.logaddexp(0.0, rho))

        sigma = np.mean(history, axis=0)

        # measure the achieved distortion at the reported sigma
        eval_noise = rng.standard_normal((max(64, 4 * cfg.draws), n_pixels))
        perturbed = flat + sigma * eval_noise
        feats = forward_features(net, perturbed).data
        final_distortion = float(np.mean(np.sum((feats - f0) ** 2, axis=1)))
    finally:
        if was_trainable:
            net.set_trainable(True)

    violation = max(0.0, final_distortion - epsilon)
    warning = violation > 2.0 * epsilon
    if warning:
        logger.warning(
            "distortion constraint not met: E=%.6g vs budget eps=%.6g",
            final_distortion, epsilon)

    sigma = sigma.reshape(shape)
    entropy = entropy_from_sigma(sigma)
    mean_entropy = float(entropy.mean())
    mask = mean_entropy > entropy
    if mask.all():
        # a true mean cannot strictly exceed every element; this happens only
        # when all entropies are equal up to rounding, where the strict
        # threshold means an empty concept set
        mask[:] = False
    return EntropyMap(
        sigma=sigma, entropy=entropy, mean_entropy=mean_entropy,
        concept_mask=mask, epsilon=float(epsilon),
        distortion=final_distortion, warning=warning, config=cfg)


def average_entropy(emap: EntropyMap) -> float:
    """Mean of the per-pixel entropies."""
    return float(np.mean(emap.entropy))


def iou_consistency(map1: EntropyMap, map2: EntropyMap,
                    overlap_mask: np.ndarray) -> float:
    """Intersection-over-union of two concept masks within the overlap.

    Each map is thresholded by its own mean entropy before comparison.  An
    empty union is reported as 0 with a warning (degenerate comparison).
    """
    overlap = np.asarray(overlap_mask, dtype=bool)
    if map1.concept_mask.shape != map2.concept_mask.shape \
            or map1.concept_mask.shape != overlap.shape:
        raise ShapeError(
            f"mask shapes disagree: {map1.concept_mask.shape}, "
            f"{map2.concept_mask.shape}, overlap {overlap.shape}")
    m1 = map1.concept_mask & overlap
    m2 = map2.concept_mask & overlap
    union = np.count_nonzero(m1 | m2)
    if union == 0:
        logger.warning("degenerate IoU: empty union within the overlap region")
        return 0.0
    return float(np.count_nonzero(m1 & m2) / union)


def _unrotate_map(emap: EntropyMap, turns: int) -> EntropyMap:
    """Map an entropy map computed on a rotated view back to the original frame."""
    def back(arr):
        return rotate_quarter(arr[None], [-turns])[0]

    return EntropyMap(
        sigma=back(emap.sigma), entropy=back(emap.entropy),
        mean_entropy=emap.mean_entropy, concept_mask=back(emap.concept_mask),
        epsilon=emap.epsilon, distortion=emap.distortion,
        warning=emap.warning, config=emap.config)


def view_consistency(net: Network, image: np.ndarray,
                     cfg: EntropyConfig | None = None,
                     seed: int = 0) -> tuple[float, EntropyMap, EntropyMap]:
    """IoU of concept masks across two augmented views of one input.

    Square images are rotated by independently drawn right angles and the
    resulting maps are rotated back to the original frame before the IoU;
    flat inputs get two independent jittered views.  Pure rotations keep
    every pixel, so the overlap is the full input.
    """
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    base = cfg or EntropyConfig()

    def per_view_cfg(offset: int) -> EntropyConfig:
        kwargs = {f: getattr(base, f) for f in EntropyConfig.__dataclass_fields__}
        kwargs["seed"] = base.seed + offset
        return EntropyConfig(**kwargs)

    if image.ndim == 3 and image.shape[-1] == image.shape[-2]:
        turns = rng.integers(0, 4, size=2)
        views = [rotate_quarter(image[None], [int(t)])[0] for t in turns]
        maps = [estimate_pixel_entropy(net, v, per_view_cfg(i + 1))
                for i, v in enumerate(views)]
        maps = [_unrotate_map(m, int(t)) for m, t in zip(maps, turns)]
    elif image.ndim == 1:
        jitter = 0.05 * float(image.std())
        views = [image + jitter * rng.standard_normal(image.shape) for _ in range(2)]
        maps = [estimate_pixel_entropy(net, v, per_view_cfg(i + 1))
                for i, v in enumerate(views)]
    else:
        raise ShapeError(f"expected a flat vector or square C x H x W image, got {image.shape}")

    overlap = np.ones(image.shape, dtype=bool)
    return iou_consistency(maps[0], maps[1], overlap), maps[0], maps[1]

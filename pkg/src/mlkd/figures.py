"""Figure rendering for run reports.

Every report-producing command can drop PNG figures next to its CSV/JSON
output: training curves, few-shot and ablation summaries, and entropy-map
heat maps.  The CSV/JSON files remain the canonical record; figures are a
convenience rendering of the same numbers.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quantification import EntropyMap
from .training import TrainLog


def plot_train_log(log: TrainLog, path) -> None:
    """Loss terms (log scale where positive) and accuracies over epochs."""
    epochs = [r.epoch for r in log.records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for name in ("align", "corr", "sup", "ce", "kd", "total"):
        values = [getattr(r, name) for r in log.records]
        if any(v != 0.0 for v in values):
            ax_loss.plot(epochs, values, label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=8)
    ax_loss.set_title("loss terms")

    for name, label in (("train_acc", "train"), ("eval_acc", "eval")):
        values = [getattr(r, name) for r in log.records]
        if not all(np.isnan(v) for v in values):
            ax_acc.plot(epochs, values, label=label)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend(fontsize=8)
    ax_acc.set_title("accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fewshot(fractions, accuracies, path) -> None:
    """Accuracy against training-set fraction, one line per seed plus the mean."""
    accuracies = np.asarray(accuracies, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    if accuracies.ndim == 2:
        for row in accuracies:
            ax.plot(fractions, row, color="lightsteelblue", linewidth=0.8)
        ax.plot(fractions, accuracies.mean(axis=0), "o-", color="navy", label="mean")
        ax.legend(fontsize=8)
    else:
        ax.plot(fractions, accuracies, "o-", color="navy")
    ax.set_xlabel("training fraction")
    ax.set_ylabel("top-1 accuracy")
    ax.set_title("few-shot distillation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(names, accuracies, path) -> None:
    """Bar chart of mean accuracy per loss combination."""
    fig, ax = plt.subplots(figsize=(6, 4))
    positions = np.arange(len(names))
    ax.bar(positions, accuracies, color="steelblue")
    ax.set_xticks(positions)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("top-1 accuracy")
    ax.set_title("loss-combination ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_entropy_map(emap: EntropyMap, path) -> None:
    """Heat map of pixel entropies plus the concept mask (images),
    or a per-feature bar plot (flat inputs)."""
    entropy = emap.entropy
    if entropy.ndim == 3:
        fig, (ax_h, ax_m) = plt.subplots(1, 2, figsize=(8, 4))
        im = ax_h.imshow(entropy[0], cmap="viridis")
        fig.colorbar(im, ax=ax_h, fraction=0.046)
        ax_h.set_title("pixel entropy")
        ax_m.imshow(emap.concept_mask[0], cmap="gray")
        ax_m.set_title("concept mask")
        for ax in (ax_h, ax_m):
            ax.set_xticks([])
            ax.set_yticks([])
    else:
        fig, ax = plt.subplots(figsize=(6, 3))
        idx = np.arange(entropy.size)
        ax.bar(idx, entropy.reshape(-1), color="steelblue")
        ax.axhline(emap.mean_entropy, color="crimson", linewidth=1,
                   label="mean entropy")
        ax.set_xlabel("input element")
        ax.set_ylabel("entropy")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bound_check(rhos, bounds, analytic, path) -> None:
    """Estimated MI lower bound against the analytic value per correlation."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(rhos, analytic, "o-", label="analytic MI")
    ax.plot(rhos, bounds, "s--", label="estimated bound")
    ax.set_xlabel("correlation")
    ax.set_ylabel("nats")
    ax.legend(fontsize=8)
    ax.set_title("mutual-information bound")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

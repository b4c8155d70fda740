"""Matplotlib rendering for run reports. Every function writes one PNG file
and returns its path. The Agg backend keeps this usable headless.
"""

from __future__ import annotations

import math
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})

_SHALLOW_COLOR = "#1f77b4"
_DEEP_COLOR = "#d62728"


def _finite_xy(xs, ys):
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    return [p[0] for p in pts], [p[1] for p in pts]


def save_federation_figures(outdir: str, records, layer_names,
                            centralized_records=None, local_epochs: int = 1) -> list[str]:
    """metrics.png: mean divergence and test accuracy per round.
    profiles.png: one divergence line per parameterized layer."""
    rounds = [r.round for r in records]
    mean_div = [r.mean_divergence for r in records]
    acc = [r.global_test_accuracy for r in records]
    loss = [r.global_train_loss for r in records]

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    axes[0].plot(rounds, mean_div, marker="o", ms=3, color=_DEEP_COLOR)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("mean layer divergence")
    axes[0].set_title("client divergence")

    ax, ay = _finite_xy(rounds, acc)
    axes[1].plot(ax, ay, marker="o", ms=3, label="federated", color=_SHALLOW_COLOR)
    if centralized_records:
        cx = [(r.epoch + 1) / local_epochs - 1 for r in centralized_records]
        cy = [r.test_accuracy for r in centralized_records]
        cx, cy = _finite_xy(cx, cy)
        axes[1].plot(cx, cy, ls="--", label="centralized (epoch scaled)", color="#555555")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel("test accuracy")
    axes[1].set_ylim(0, 1)
    axes[1].legend(loc="lower right")
    axes[1].set_title("accuracy")

    axes[2].plot(rounds, loss, marker="o", ms=3, color="#2ca02c")
    axes[2].set_xlabel("round")
    axes[2].set_ylabel("mean local train loss")
    axes[2].set_title("training loss")
    fig.tight_layout()
    metrics_path = os.path.join(outdir, "metrics.png")
    fig.savefig(metrics_path)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6.4, 4))
    values = np.array([[r.per_layer_divergence[name] for r in records] for name in layer_names])
    for i, name in enumerate(layer_names):
        ax.plot(rounds, values[i], label=name, lw=1.2)
    if values.size and values.min() > 0:
        ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel("layer divergence")
    ax.set_title("per-layer client divergence")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    profiles_path = os.path.join(outdir, "profiles.png")
    fig.savefig(profiles_path)
    plt.close(fig)
    return [metrics_path, profiles_path]


def save_accumulation_figure(outdir: str, results) -> str:
    """Log-scale gradient scatter per conv position, shallow vs deep, all seeds."""
    fig, ax = plt.subplots(figsize=(6.4, 4))
    for label, color, pick in (("shallow", _SHALLOW_COLOR, lambda r: r.shallow_profile),
                               ("deep", _DEEP_COLOR, lambda r: r.deep_profile)):
        curves = []
        for res in results:
            prof = pick(res)
            vals = [v for n, v in zip(prof.layer_names, prof.values) if n.startswith("conv")]
            curves.append(vals)
            ax.plot(range(1, len(vals) + 1), vals, color=color, alpha=0.35, lw=1)
        mean_curve = np.mean(np.array(curves), axis=0)
        ax.plot(range(1, len(mean_curve) + 1), mean_curve, color=color, lw=2.2,
                marker="o", ms=4, label=f"{label} (mean of {len(curves)} seeds)")
    ax.set_yscale("log")
    ax.set_xlabel("conv position (1 = closest to input)")
    ax.set_ylabel("gradient scatter (log scale)")
    ax.set_title("gradient scatter accumulates toward the input")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(outdir, "profiles.png")
    fig.savefig(path)
    plt.close(fig)
    return path


def save_decomposition_figure(outdir: str, result) -> str:
    """Bar view of the mean squared deviation terms and the cross term."""
    fig, ax = plt.subplots(figsize=(6.4, 4))
    labels = ["upstream\n(next layer)", "carried term", "local term",
              "carried+local\n(this layer)"]
    values = [result.mean_sq_cur, result.mean_sq_t1, result.mean_sq_t2, result.mean_sq_prev]
    colors = [_SHALLOW_COLOR, "#7fb3d3", "#f2a65a", _DEEP_COLOR]
    ax.bar(labels, values, color=colors)
    ax.set_ylabel("mean squared deviation")
    ax.set_title(f"gradient deviation decomposition "
                 f"(cross term {result.cross_mean:.2e} +- {result.cross_stderr:.1e})")
    fig.tight_layout()
    path = os.path.join(outdir, "decomposition.png")
    fig.savefig(path)
    plt.close(fig)
    return path


def save_comparison_figure(outdir: str, axis_name: str, groups: dict) -> str:
    """Divergence and accuracy against one config axis.

    groups maps axis value -> list of (final_divergence, best_accuracy) pairs,
    one per seed. Numeric axes get line plots, categorical axes get bars.
    """
    values = list(groups)
    numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)
    if numeric:
        values = sorted(values)
    div_mean = [float(np.mean([p[0] for p in groups[v]])) for v in values]
    acc_pairs = [[p[1] for p in groups[v] if p[1] is not None and math.isfinite(p[1])]
                 for v in values]
    acc_mean = [float(np.mean(a)) if a else math.nan for a in acc_pairs]

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    if numeric:
        for v in values:
            axes[0].plot([v] * len(groups[v]), [p[0] for p in groups[v]], "o",
                         color=_DEEP_COLOR, alpha=0.4, ms=4)
            axes[1].plot([v] * len(groups[v]),
                         [p[1] for p in groups[v] if p[1] is not None], "o",
                         color=_SHALLOW_COLOR, alpha=0.4, ms=4)
        axes[0].plot(values, div_mean, color=_DEEP_COLOR, lw=2, marker="s")
        axes[1].plot(values, acc_mean, color=_SHALLOW_COLOR, lw=2, marker="s")
    else:
        pos = range(len(values))
        axes[0].bar(pos, div_mean, color=_DEEP_COLOR, alpha=0.8)
        axes[1].bar(pos, acc_mean, color=_SHALLOW_COLOR, alpha=0.8)
        for a in axes:
            a.set_xticks(list(pos))
            a.set_xticklabels([str(v) for v in values])
    axes[0].set_xlabel(axis_name)
    axes[0].set_ylabel("divergence of trained model")
    axes[1].set_xlabel(axis_name)
    axes[1].set_ylabel("best test accuracy")
    axes[1].set_ylim(0, 1)
    fig.tight_layout()
    path = os.path.join(outdir, "comparison.png")
    fig.savefig(path)
    plt.close(fig)
    return path

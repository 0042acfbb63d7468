"""Report figures rendered straight to files (Agg backend, no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curves(curves, path, smooth=25):
    """``curves``: {(variant, seed): losses}; one line per run, coloured by variant."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = sorted({v for v, _ in curves})
    colours = {n: plt.cm.tab10(i % 10) for i, n in enumerate(names)}
    for (name, seed), losses in sorted(curves.items()):
        y = np.asarray(losses, dtype=float)
        if y.size == 0:
            continue
        k = max(1, min(smooth, y.size))
        y = np.convolve(y, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(y.size) + k - 1, y, color=colours[name], alpha=0.8,
                label=name if seed == min(s for v, s in curves if v == name) else None)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(f"training loss ({smooth}-step mean)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def ablation_bars(summary, path):
    """Mean held-out loss per variant with +-1 sd error bars."""
    names = list(summary)
    means = [summary[n]["mean_loss"] for n in names]
    sds = [summary[n]["sd_loss"] for n in names]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 4))
    ax.bar(range(len(names)), means, yerr=sds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("held-out loss")
    return _save(fig, path)


def logit_heatmap(matrix, path, title=""):
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix, cmap="RdBu_r")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("key token")
    ax.set_ylabel("query token")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def per_frame_errors(columns, path, ylabel="error"):
    """``columns``: {label: per-frame values}."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, vals in columns.items():
        ax.plot(np.arange(len(vals)), vals, marker="o", ms=3, label=label)
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)

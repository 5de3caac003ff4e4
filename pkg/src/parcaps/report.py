"""Figure rendering for run reports.

Every figure lands next to the delimited output it illustrates: training
curves beside metrics.csv, the confusion heatmap and per-class bars beside
the evaluation CSVs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import metrics as met

plt.rcParams.update({
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
})


def _read_metrics_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def plot_training_curves(metrics_csv, out_path):
    """Loss and accuracy trajectories from a metric log."""
    rows = _read_metrics_csv(metrics_csv)
    out_path = Path(out_path)
    if not rows:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.set_title("no epochs logged")
        fig.savefig(out_path, bbox_inches="tight")
        plt.close(fig)
        return out_path
    epochs = [int(r["epoch"]) for r in rows]
    loss = [float(r["loss"]) for r in rows]
    wacc = [float(r["WAcc"]) for r in rows]
    acc = [float(r["Acc"]) for r in rows]
    agr = [float(r["Agr"]) if r["Agr"] else np.nan for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, loss, color="#0072B2")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(epochs, acc, label="Acc", color="#009E73")
    ax2.plot(epochs, wacc, label="WAcc", color="#E69F00")
    if not all(np.isnan(agr)):
        ax2.plot(epochs, agr, label="Agr", color="#CC79A7", linestyle="--")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("percent")
    ax2.set_ylim(0, 102)
    ax2.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_confusion_matrix(cm: met.ConfusionMatrix, out_path, normalize=True):
    counts = cm.counts.astype(float)
    shown = counts
    if normalize:
        row_sum = counts.sum(axis=1, keepdims=True)
        shown = np.divide(counts, row_sum, out=np.zeros_like(counts), where=row_sum > 0)
    k = cm.k
    fig, ax = plt.subplots(figsize=(0.55 * k + 2.2, 0.55 * k + 1.8))
    im = ax.imshow(shown, cmap="Blues", vmin=0, vmax=shown.max() or 1)
    ax.set_xticks(range(k), cm.class_names, rotation=60, ha="right")
    ax.set_yticks(range(k), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.grid(False)
    if k <= 20:
        thresh = (shown.max() or 1) / 2
        for i in range(k):
            for j in range(k):
                if counts[i, j]:
                    ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                            fontsize=7, color="white" if shown[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return Path(out_path)


def plot_per_class_metrics(cm: met.ConfusionMatrix, out_path):
    pre, sen, mean_pre, mean_sen = met.precision_sensitivity(cm)
    k = cm.k
    x = np.arange(k)
    fig, ax = plt.subplots(figsize=(max(5.0, 0.5 * k + 2), 3.2))
    ax.bar(x - 0.2, np.nan_to_num(pre), width=0.4, label="precision", color="#0072B2")
    ax.bar(x + 0.2, np.nan_to_num(sen), width=0.4, label="sensitivity", color="#E69F00")
    ax.set_xticks(x, cm.class_names, rotation=60, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    ax.set_title(f"mean precision {mean_pre:.3f}, mean sensitivity {mean_sen:.3f}")
    fig.tight_layout()
    fig.savefig(out_path, bbox_inches="tight")
    plt.close(fig)
    return Path(out_path)

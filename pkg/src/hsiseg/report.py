"""Run reports: metrics JSON, a delimited comparison table, and figures.

Everything here is deterministic for fixed inputs — metrics files are
byte-identical across reruns of the same seed — and figures are rendered
headlessly to files next to the tables.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluate import CLASS_NAMES

METRIC_COLUMNS = ["accuracy", "f1", "iou"]


def write_metrics_json(path, metrics: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def write_comparison_csv(path, results) -> None:
    """One row per model: per-class + avg for each metric, then AUC.

    ``results`` is an ordered list of (model_name, metrics_dict) pairs as
    produced by evaluate_predictions.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["model"]
    for metric in METRIC_COLUMNS:
        columns += [f"{metric}_{name}" for name in CLASS_NAMES] + [f"{metric}_avg"]
    columns.append("auc")

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for name, metrics in results:
            row = [name]
            for metric in METRIC_COLUMNS:
                table = metrics[metric]
                row += [f"{table.get(cls, float('nan')):.4f}" for cls in CLASS_NAMES]
                row.append(f"{table['avg']:.4f}")
            auc = metrics.get("auc")
            row.append("" if auc is None else f"{auc:.4f}")
            writer.writerow(row)


def plot_roc_curves(path, curves) -> None:
    """Overlayed ROC curves; ``curves`` maps name -> (fpr, tpr, auc)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (fpr, tpr, auc) in curves.items():
        ax.plot(fpr, tpr, label=f"{name} (AUC={auc:.3f})")
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title("Tumor vs healthy ROC")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_histories(path, histories) -> None:
    """Validation macro-accuracy per epoch for each run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, history in histories.items():
        epochs = [h["epoch"] for h in history]
        acc = [h["val_macro_acc"] for h in history]
        ax.plot(epochs, acc, label=name)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Validation macro accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_weight_histogram(path, weights, kept=None) -> None:
    """Distribution of tile loss weights, optionally split by filter verdict."""
    weights = np.asarray(weights, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4))
    bins = np.linspace(0.0, 1.0, 41)
    if kept is None:
        ax.hist(weights, bins=bins, color="steelblue")
    else:
        kept = np.asarray(kept, dtype=bool)
        ax.hist(weights[kept], bins=bins, alpha=0.7, label="kept", color="seagreen")
        ax.hist(weights[~kept], bins=bins, alpha=0.7, label="filtered", color="indianred")
        ax.legend(fontsize=8)
    ax.set_xlabel("Tile loss weight")
    ax.set_ylabel("Tiles")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Tile-level evaluation: per-class recall/F1/IoU, ROC AUC, overlay images.

Per-class "accuracy" means recall. The AUC treats tumor as the positive
class of a tumor-vs-healthy problem with background tiles excluded, using
the rank-based Mann-Whitney statistic (ties count half).
"""

import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from .errors import DomainError, ShapeError

CLASS_NAMES = ("background", "healthy", "tumor")
BACKGROUND, HEALTHY, TUMOR = 0, 1, 2

# overlay colors per class id: background blue, healthy green, tumor red
OVERLAY_COLORS = {
    BACKGROUND: (0, 0, 255),
    HEALTHY: (0, 255, 0),
    TUMOR: (255, 0, 0),
}
OVERLAY_ALPHA = 0.45


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {counts.shape}")
        if counts.min() < 0:
            raise DomainError("confusion matrix counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes: int) -> "ConfusionMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if labels.shape != predictions.shape:
            raise ShapeError(
                f"labels {labels.shape} and predictions {predictions.shape} differ"
            )
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (labels, predictions), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _metric_arrays(cm: ConfusionMatrix):
    """Per-class (recall, f1, iou, present) with zero-count classes masked."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    present = (tp + fn + fp) > 0

    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), 0.0)
    return recall, f1, iou, present


def per_class_metrics(cm: ConfusionMatrix) -> dict:
    """Recall/F1/IoU per class plus their unweighted macro averages.

    Classes with no ground-truth and no predicted samples are left out of
    the macro average (with a warning), since no metric is defined for them.
    """
    if cm.total == 0:
        raise DomainError("cannot compute metrics on an empty confusion matrix")
    recall, f1, iou, present = _metric_arrays(cm)
    if not present.all():
        absent = np.flatnonzero(~present).tolist()
        warnings.warn(
            f"classes {absent} absent from truth and predictions; "
            "excluded from macro averages",
            stacklevel=2,
        )
    return {
        "accuracy": {int(c): float(recall[c]) for c in np.flatnonzero(present)},
        "f1": {int(c): float(f1[c]) for c in np.flatnonzero(present)},
        "iou": {int(c): float(iou[c]) for c in np.flatnonzero(present)},
        "macro": {
            "accuracy": float(recall[present].mean()),
            "f1": float(f1[present].mean()),
            "iou": float(iou[present].mean()),
        },
    }


def macro_accuracy(labels, predictions, num_classes: int) -> float:
    """Mean per-class recall over the classes that actually occur."""
    cm = ConfusionMatrix.from_predictions(labels, predictions, num_classes)
    if cm.total == 0:
        return float("nan")
    recall, _, _, present = _metric_arrays(cm)
    return float(recall[present].mean())


# ---------------------------------------------------------------------------
# ROC


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be equal-length 1-d arrays")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs both a positive and a negative sample")
    ranks = rankdata(scores)  # average ranks on ties (midranks)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) sweeping the decision threshold high to low."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC curve needs both a positive and a negative sample")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    # keep one point per distinct threshold (the last index of each run)
    distinct = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tpr = np.concatenate([[0.0], tp[distinct] / n_pos])
    fpr = np.concatenate([[0.0], fp[distinct] / n_neg])
    thresholds = np.concatenate([[np.inf], sorted_scores[distinct]])
    return fpr, tpr, thresholds


def tumor_probability(probs: np.ndarray, tumor: int = TUMOR, healthy: int = HEALTHY):
    """Tumor probability renormalized over {tumor, healthy} only."""
    probs = np.asarray(probs, dtype=np.float64)
    denom = probs[:, tumor] + probs[:, healthy]
    return np.where(denom > 0, probs[:, tumor] / np.maximum(denom, 1e-300), 0.5)


def label_transitions(edges: np.ndarray, predictions: np.ndarray) -> int:
    """Number of graph edges whose two endpoints carry different labels."""
    edges = np.asarray(edges, dtype=np.int64)
    predictions = np.asarray(predictions)
    if edges.size == 0:
        return 0
    return int(np.count_nonzero(predictions[edges[:, 0]] != predictions[edges[:, 1]]))


def evaluate_predictions(labels, predictions, probs=None, num_classes: int = 3) -> dict:
    """Table-shaped metrics dict: per-class + avg per metric, plus AUC.

    AUC is computed over non-background tiles from ``probs`` (n, C); it is
    None when either binary class is missing or probs are not given.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    cm = ConfusionMatrix.from_predictions(labels, predictions, num_classes)
    metrics = per_class_metrics(cm)

    def named(metric: str) -> dict:
        row = {
            CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): value
            for c, value in metrics[metric].items()
        }
        row["avg"] = metrics["macro"][metric]
        return row

    auc = None
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        mask = (labels == TUMOR) | (labels == HEALTHY)
        binary = labels[mask] == TUMOR
        if binary.size and 0 < binary.sum() < binary.size:
            auc = roc_auc(tumor_probability(probs[mask]), binary)
    return {
        "accuracy": named("accuracy"),
        "f1": named("f1"),
        "iou": named("iou"),
        "auc": auc,
        "n_tiles": cm.total,
        "confusion_matrix": cm.counts.tolist(),
    }


# ---------------------------------------------------------------------------
# overlay rendering


def overlay_array(cube, tilemap, predictions, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """(H, W, 3) uint8 overlay: middle-channel luminosity tinted per tile class."""
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.shape != (len(tilemap.tiles),):
        raise ShapeError(
            f"need one prediction per tile: got {predictions.shape} "
            f"for {len(tilemap.tiles)} tiles"
        )
    base = cube.data[:, :, cube.channels // 2]  # (W, H) in [0, 1]
    gray = np.clip(base * 255.0, 0, 255)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)

    palette = np.zeros((max(OVERLAY_COLORS) + 1, 3), dtype=np.float64)
    for class_id, color in OVERLAY_COLORS.items():
        palette[class_id] = color
    tile_class = np.clip(predictions[tilemap.assignment], 0, len(palette) - 1)
    color = palette[tile_class]
    blended = (1.0 - alpha) * rgb + alpha * color
    # image files are row-major (y down), cube arrays are x-major
    return np.round(blended).astype(np.uint8).transpose(1, 0, 2)


def render_overlay(path, cube, tilemap, predictions, alpha: float = OVERLAY_ALPHA) -> None:
    """Write the class overlay as a PNG."""
    Image.fromarray(overlay_array(cube, tilemap, predictions, alpha)).save(path, format="PNG")

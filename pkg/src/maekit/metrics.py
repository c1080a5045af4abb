"""Classification accuracy and the segmentation f-score."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accuracy(preds, labels) -> float:
    """Fraction of exact matches between predicted and true class indices."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ContractError(
            f"accuracy needs equal-length non-empty inputs, got {preds.shape}"
            f" and {labels.shape}"
        )
    return float(np.mean(preds == labels))


def argmax_classes(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def f_score(c: ConfusionCounts) -> float:
    """2*tp / (2*tp + fp + fn); 0 when the denominator vanishes."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 0.0
    return 2.0 * c.tp / denom


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ContractError(f"{name} must be binary, found values {values[:8]}")
    return arr.astype(bool)


def segmentation_confusion(pred_masks, true_masks) -> ConfusionCounts:
    """Pixel-wise counts micro-aggregated across the whole evaluation set."""
    pred = _check_binary(pred_masks, "predicted masks")
    true = _check_binary(true_masks, "true masks")
    if pred.shape != true.shape:
        raise ContractError(
            f"mask shapes differ: {pred.shape} vs {true.shape}"
        )
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    return ConfusionCounts(tp, fp, fn, tn)


def per_image_f_scores(pred_masks, true_masks) -> list[float]:
    """Secondary per-image view of the same counts (the report's headline
    number stays the micro-aggregated score)."""
    pred = np.asarray(pred_masks)
    true = np.asarray(true_masks)
    return [f_score(segmentation_confusion(p, t)) for p, t in zip(pred, true)]


def write_metrics_report(path, metrics: dict[str, float]) -> None:
    """Plain-text `metric<TAB>value` lines, six decimal places."""
    lines = [f"{k}\t{metrics[k]:.6f}" for k in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

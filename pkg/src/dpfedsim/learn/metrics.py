"""Segmentation overlap metrics.

Per-class Dice = 2TP / (2TP + FP + FN) and Jaccard = TP / (TP + FP + FN),
macro-averaged over the classes that appear in either mask (classes absent
from both are excluded, since their score would be 0/0).  Accuracy is the
plain fraction of correctly labeled pixels.  Per class Jaccard <= Dice, and
the macro average preserves that ordering.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["SegMetrics", "seg_metrics"]

_NUM_CLASSES = 3


@dataclass(frozen=True)
class SegMetrics:
    dice: float
    jaccard: float
    acc: float


def seg_metrics(pred_mask, true_mask) -> SegMetrics:
    """Dice, Jaccard, and pixel accuracy between two label masks.

    Accepts any matching shapes (single masks or stacked batches); counts
    are pooled over all given pixels.
    """
    pred = np.asarray(pred_mask).ravel()
    true = np.asarray(true_mask).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {np.asarray(pred_mask).shape} vs {np.asarray(true_mask).shape}")
    if pred.size == 0:
        raise ValueError("masks must be nonempty")
    for name, arr in (("pred", pred), ("true", true)):
        if arr.min() < 0 or arr.max() >= _NUM_CLASSES:
            raise ValueError(f"{name} mask labels out of range [0, {_NUM_CLASSES - 1}]")
    cm = np.bincount(
        true.astype(np.int64) * _NUM_CLASSES + pred.astype(np.int64),
        minlength=_NUM_CLASSES * _NUM_CLASSES,
    ).reshape(_NUM_CLASSES, _NUM_CLASSES)
    dices, jaccards = [], []
    for c in range(_NUM_CLASSES):
        tp = cm[c, c]
        fn = cm[c, :].sum() - tp
        fp = cm[:, c].sum() - tp
        if tp + fp + fn == 0:
            continue
        dices.append(2.0 * tp / (2.0 * tp + fp + fn))
        jaccards.append(tp / (tp + fp + fn))
    acc = float(np.trace(cm)) / pred.size
    return SegMetrics(float(np.mean(dices)), float(np.mean(jaccards)), acc)

"""Voxel-wise Dice, sensitivity and specificity on binarised masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def _binary(mask, name):
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} mask must be binary (0/1)")
    return m.astype(bool)


def confusion(pred_mask, truth_mask) -> ConfusionCounts:
    pred = _binary(pred_mask, "pred")
    truth = _binary(truth_mask, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice_coefficient(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def specificity(c: ConfusionCounts) -> float:
    denom = c.tn + c.fp
    return 1.0 if denom == 0 else c.tn / denom


def summarize(counts: list[ConfusionCounts], pooling: str = "slice") -> tuple[float, float, float]:
    """Reduce per-slice counts to (dice, sensitivity, specificity).

    ``slice`` pooling averages per-slice values; slices without ground-truth
    positives are left out of the Dice and sensitivity means (they still
    count for specificity).  ``global`` pooling sums the counts first.
    """
    if not counts:
        raise ValueError("no slices to evaluate")
    if pooling == "global":
        tot = counts[0]
        for c in counts[1:]:
            tot = tot + c
        return dice_coefficient(tot), sensitivity(tot), specificity(tot)
    if pooling != "slice":
        raise ValueError(f"pooling must be 'slice' or 'global', got {pooling!r}")
    positive = [c for c in counts if c.tp + c.fn > 0]
    spec = float(np.mean([specificity(c) for c in counts]))
    if not positive:
        # nothing to detect anywhere: score the (empty) overlap on pooled counts
        tot = counts[0]
        for c in counts[1:]:
            tot = tot + c
        return dice_coefficient(tot), 1.0, spec
    dice = float(np.mean([dice_coefficient(c) for c in positive]))
    sens = float(np.mean([sensitivity(c) for c in positive]))
    return dice, sens, spec


def evaluate_arrays(model, params, images, masks, threshold: float = 0.5,
                    pooling: str = "slice", batch_size: int = 16):
    """Metrics of ``model`` over an image/mask stack, one slice at a time."""
    from .models import predict

    if len(images) == 0:
        raise ValueError("dataset is empty")
    counts = []
    for start in range(0, len(images), batch_size):
        pred = predict(model, params, images[start : start + batch_size], threshold)
        for pm, tm in zip(pred, masks[start : start + batch_size]):
            counts.append(confusion(pm, tm))
    return summarize(counts, pooling)


def evaluate_dataset(model, params, dataset, threshold: float = 0.5, pooling: str = "slice"):
    """Mean (dice, sensitivity, specificity) over a list of slice samples."""
    samples = list(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    images = np.concatenate([s.image for s in samples])
    masks = np.concatenate([s.mask for s in samples])
    return evaluate_arrays(model, params, images, masks, threshold, pooling)

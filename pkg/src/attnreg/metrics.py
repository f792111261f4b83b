"""Segmentation metrics over integer label masks.

Counts are pooled over the whole dataset before any ratio is taken
(VOC convention), so results are independent of image order and
partial accumulators merge associatively. Class 0 is background.

Rate definitions (documented because the choice is a convention):
  fp_rate = pixels predicted foreground where truth is background / all pixels
  fn_rate = pixels predicted background where truth is foreground / all pixels
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .localization import seed_from_maps, upsample_nearest

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))


class ConfusionAccumulator:
    """Pooled per-class intersection/union/FP/FN pixel counts."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ContractError("num_classes (including background) must be >= 1")
        self.num_classes = num_classes
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.false_positive = np.zeros(num_classes, dtype=np.int64)
        self.false_negative = np.zeros(num_classes, dtype=np.int64)
        self.over_activation = 0   # pred fg, gt bg
        self.under_activation = 0  # pred bg, gt fg
        self.total_pixels = 0

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        if pred.size and (pred.min() < 0 or pred.max() >= self.num_classes):
            raise ContractError(f"pred labels outside 0..{self.num_classes - 1}")
        if gt.size and (gt.min() < 0 or gt.max() >= self.num_classes):
            raise ContractError(f"gt labels outside 0..{self.num_classes - 1}")
        for k in range(self.num_classes):
            p, g = pred == k, gt == k
            self.intersection[k] += int((p & g).sum())
            self.union[k] += int((p | g).sum())
            self.false_positive[k] += int((p & ~g).sum())
            self.false_negative[k] += int((g & ~p).sum())
        self.over_activation += int(((pred != 0) & (gt == 0)).sum())
        self.under_activation += int(((pred == 0) & (gt != 0)).sum())
        self.total_pixels += pred.size

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        out.false_positive = self.false_positive + other.false_positive
        out.false_negative = self.false_negative + other.false_negative
        out.over_activation = self.over_activation + other.over_activation
        out.under_activation = self.under_activation + other.under_activation
        out.total_pixels = self.total_pixels + other.total_pixels
        return out

    def per_class_iou(self) -> list[float | None]:
        """IoU per class; None for classes absent from both pred and gt."""
        return [self.intersection[k] / self.union[k] if self.union[k] > 0 else None
                for k in range(self.num_classes)]

    def miou(self) -> float | None:
        present = [v for v in self.per_class_iou() if v is not None]
        return float(np.mean(present)) if present else None

    def fp_rate(self) -> float | None:
        return self.over_activation / self.total_pixels if self.total_pixels else None

    def fn_rate(self) -> float | None:
        return self.under_activation / self.total_pixels if self.total_pixels else None

    def summary(self) -> dict:
        return {"per_class_iou": self.per_class_iou(), "miou": self.miou(),
                "fp_rate": self.fp_rate(), "fn_rate": self.fn_rate(),
                "total_pixels": self.total_pixels}


def miou(pred_masks, gt_masks, num_classes: int) -> tuple[list[float | None], float | None]:
    """Pooled per-class IoU and its mean over classes present anywhere."""
    if len(pred_masks) != len(gt_masks):
        raise DimensionError(f"{len(pred_masks)} predictions vs {len(gt_masks)} truths")
    acc = ConfusionAccumulator(num_classes)
    for p, g in zip(pred_masks, gt_masks):
        acc.add(p, g)
    return acc.per_class_iou(), acc.miou()


def fp_fn_rates(pred_masks, gt_masks) -> tuple[float | None, float | None]:
    """Dataset-pooled over-activation and under-activation pixel rates."""
    if len(pred_masks) != len(gt_masks):
        raise DimensionError(f"{len(pred_masks)} predictions vs {len(gt_masks)} truths")
    over = under = total = 0
    for p, g in zip(pred_masks, gt_masks):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise DimensionError(f"pred shape {p.shape} != gt shape {g.shape}")
        over += int(((p != 0) & (g == 0)).sum())
        under += int(((p == 0) & (g != 0)).sum())
        total += p.size
    if total == 0:
        return None, None
    return over / total, under / total


def best_threshold_miou(maps_per_image, gt_masks, num_classes: int,
                        thresholds=None) -> tuple[float | None, float | None]:
    """Sweep the background threshold over a grid (default 0.05 .. 0.95,
    step 0.05); return (best threshold, best mIoU). Ties go to the
    smaller threshold. Seeds are upsampled nearest-neighbor to each
    ground-truth mask's size. Empty input -> (None, None)."""
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ContractError("threshold grid is empty")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ContractError("thresholds must lie in [0, 1]")
    if len(maps_per_image) != len(gt_masks):
        raise DimensionError(f"{len(maps_per_image)} map sets vs {len(gt_masks)} truths")
    if len(gt_masks) == 0:
        return None, None
    best_theta, best = None, None
    for theta in sorted(thresholds):
        acc = ConfusionAccumulator(num_classes)
        for maps, gt in zip(maps_per_image, gt_masks):
            seed = seed_from_maps(maps, theta)
            pred = upsample_nearest(seed.labels, gt.shape[0], gt.shape[1])
            acc.add(pred, gt)
        score = acc.miou()
        if score is not None and (best is None or score > best):
            best_theta, best = theta, score
    return best_theta, best

"""Segmentation evaluation: confusion matrix accumulation, per-class IoU,
mIoU and pixel accuracy.

Classes absent from both prediction and ground truth have undefined IoU
(NaN) and are excluded from the mIoU mean by default; a flag counts them
as zero instead for fidelity experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import IGNORE, LabelMap


@dataclass
class ConfusionMatrix:
    """counts[g][p] = pixels with ground truth g predicted p."""

    num_classes: int
    counts: np.ndarray = None
    ignored_pixels: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes),
                                   dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError("counts must be C x C")
            if self.counts.min() < 0:
                raise ValueError("counts must be non-negative")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.num_classes,
                               self.counts + other.counts,
                               self.ignored_pixels + other.ignored_pixels)

    @property
    def total_counted(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Return a new matrix with one prediction/label pair accumulated;
    IGNORE ground-truth pixels only increment `ignored_pixels`."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if np.any(pred.data == IGNORE):
        raise ValueError("prediction must not contain IGNORE")
    C = cm.num_classes
    if pred.num_classes != C or gt.num_classes != C:
        raise ValueError("class count mismatch with matrix")
    p = pred.data.ravel()
    g = gt.data.ravel()
    mask = g != IGNORE
    flat = np.bincount(g[mask] * C + p[mask], minlength=C * C)
    return ConfusionMatrix(C, cm.counts + flat.reshape(C, C),
                           cm.ignored_pixels + int((~mask).sum()))


@dataclass
class EvalReport:
    per_class_iou: list          # NaN marks undefined classes
    miou: float
    pixel_accuracy: float
    num_images: int = 0
    class_names: list | None = None

    def to_json(self) -> str:
        d = {
            "per_class_iou": [None if np.isnan(v) else v
                              for v in self.per_class_iou],
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "num_images": self.num_images,
        }
        if self.class_names is not None:
            d["class_names"] = list(self.class_names)
        return json.dumps(d, indent=1)


def compute_report(cm: ConfusionMatrix, num_images: int = 0,
                   class_names=None,
                   undefined_as_zero: bool = False) -> EvalReport:
    """IoU_c = TP / (TP + FP + FN); pixel accuracy = trace / counted."""
    total = cm.total_counted
    if total == 0:
        raise ValueError("empty confusion matrix: no counted pixels")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    if undefined_as_zero:
        miou = float(np.where(defined, iou, 0.0).mean())
    else:
        miou = float(iou[defined].mean())
    return EvalReport(
        per_class_iou=iou.tolist(),
        miou=miou,
        pixel_accuracy=float(tp.sum() / total),
        num_images=num_images,
        class_names=class_names,
    )

"""Segmentation/classification metrics and heatmap image export."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .losses import UNLABELED


def segment(stack: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the leading class axis (ties go to the lowest index)."""
    stack = np.asarray(stack)
    return np.argmax(stack, axis=-3).astype(np.uint8)


@dataclass
class ConfusionAccumulator:
    num_classes: int
    matrix: np.ndarray = field(default=None)  # rows: target, cols: prediction

    def __post_init__(self):
        if self.matrix is None:
            self.matrix = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, pred, target) -> "ConfusionAccumulator":
        pred = np.asarray(pred).ravel().astype(np.int64)
        target = np.asarray(target).ravel().astype(np.int64)
        keep = target != UNLABELED
        pred, target = pred[keep], target[keep]
        if np.any(target >= self.num_classes) or np.any(pred >= self.num_classes):
            raise ValueError("class index out of range")
        self.matrix += np.bincount(target * self.num_classes + pred,
                                   minlength=self.num_classes ** 2).reshape(self.num_classes, -1)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(self.num_classes, self.matrix + other.matrix)

    @property
    def intersection(self) -> np.ndarray:
        return np.diag(self.matrix)

    @property
    def union(self) -> np.ndarray:
        return self.matrix.sum(0) + self.matrix.sum(1) - np.diag(self.matrix)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def miou(acc: ConfusionAccumulator, exclude_absent: bool = True) -> tuple[float, np.ndarray]:
    """Mean IoU and per-class IoU (NaN for classes with empty union).

    With ``exclude_absent`` (default) classes missing from both prediction and
    target do not enter the mean; otherwise they count as IoU 1.
    """
    if acc.total == 0:
        raise ValueError("empty accumulator")
    inter, union = acc.intersection, acc.union
    iou = np.full(acc.num_classes, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    if exclude_absent:
        return float(np.mean(iou[present])), iou
    return float(np.mean(np.where(present, iou, 1.0))), iou


def iou_report(acc: ConfusionAccumulator, class_names) -> dict:
    """JSON-ready per-class IoU (``None`` for absent classes) plus the mean."""
    m, iou = miou(acc)
    return {"miou": m, "convention": "classes absent from prediction and target excluded",
            "per_class": {name: (None if np.isnan(v) else float(v)) for name, v in zip(class_names, iou)},
            "pixels": acc.total}


def f1_multilabel(scores, labels) -> float:
    """Micro-averaged F1 of ``sigmoid(score) > 0.5`` (i.e. ``score > 0``) decisions.

    ``scores`` are foreground-only ``(B, num_fg)``; ``labels`` multi-hot.
    """
    pred = np.asarray(scores) > 0
    truth = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


# -- image export ------------------------------------------------------------

def diverging_rgb(t: np.ndarray) -> np.ndarray:
    """Blue-white-red map of ``t`` in [-1, 1] to uint8 RGB."""
    t = np.clip(t, -1.0, 1.0)
    pos, neg = np.maximum(t, 0.0), np.maximum(-t, 0.0)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    return np.round(np.stack([r, g, b], axis=-1) * 255.0).astype(np.uint8)


def heatmap_to_unit(heatmap: np.ndarray, mode: str = "raw", num_classes: int | None = None) -> np.ndarray:
    """Map heatmap values to [-1, 1] with the white point at 0 (raw) or 1/K (softmaxed)."""
    h = np.asarray(heatmap, dtype=np.float64)
    if mode == "raw":
        scale = np.max(np.abs(h))
        return h / scale if scale > 0 else np.zeros_like(h)
    if mode == "softmaxed":
        if not num_classes:
            raise ValueError("softmaxed mode needs num_classes")
        c = 1.0 / num_classes
        return np.where(h >= c, (h - c) / (1 - c), (h - c) / c)
    raise ValueError(f"unknown mode {mode!r}")


def export_heatmap_png(heatmap, path, mode: str = "raw", num_classes: int | None = None) -> Path:
    h = np.asarray(heatmap)
    if h.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    path = Path(path)
    Image.fromarray(diverging_rgb(heatmap_to_unit(h, mode, num_classes)), mode="RGB").save(path)
    return path


def decode_heatmap_png(path) -> np.ndarray:
    """Recover the [-1, 1] colormap coordinate from an exported heatmap."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb[..., 0] - rgb[..., 2]


SEG_PALETTE = np.array([[0, 0, 0], [220, 60, 50], [50, 180, 80], [60, 90, 220], [230, 200, 50],
                        [160, 60, 200], [60, 200, 200], [240, 130, 40], [140, 140, 140]], dtype=np.uint8)


def export_segmentation_png(mask, path) -> Path:
    mask = np.asarray(mask)
    colors = SEG_PALETTE[np.asarray(mask) % len(SEG_PALETTE)]
    colors[mask == UNLABELED] = 255
    path = Path(path)
    Image.fromarray(colors, mode="RGB").save(path)
    return path


def softmax(stack: np.ndarray, axis: int = 0) -> np.ndarray:
    m = stack.max(axis=axis, keepdims=True)
    e = np.exp(stack - m)
    return e / e.sum(axis=axis, keepdims=True)

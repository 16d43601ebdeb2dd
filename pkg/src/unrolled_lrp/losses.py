"""Segmentation and classification losses with analytic gradients."""
from __future__ import annotations

import numpy as np

UNLABELED = 255


def log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def seg_loss(logits: np.ndarray, masks: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixel-wise softmax cross-entropy, averaged over labelled pixels.

    ``logits`` is ``(B, K, H, W)``; ``masks`` is ``(B, H, W)`` with class
    indices or ``UNLABELED``.  Returns ``(loss, d loss / d logits)``; with no
    labelled pixel the loss and gradient are exactly zero.
    """
    b, k, h, w = logits.shape
    masks = np.asarray(masks)
    if masks.shape != (b, h, w):
        raise ValueError(f"mask shape {masks.shape} does not match logits {logits.shape}")
    labelled = masks != UNLABELED
    if np.any(masks[labelled] >= k):
        raise ValueError(f"mask index >= class count {k}")
    n = int(labelled.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits, axis=1)
    target = np.where(labelled, masks, 0).astype(np.int64)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    loss = -float(picked[labelled].sum()) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1.0, axis=1)
    grad *= labelled[:, None] / n
    return loss, grad


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-softplus(-x))


def cls_loss(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Sigmoid cross-entropy per foreground class; background weight 0.

    ``scores`` is ``(B, K)`` with column 0 the background; ``labels`` is the
    multi-hot ``(B, K - 1)`` foreground label matrix.  Mean over images and
    foreground classes.
    """
    scores = np.atleast_2d(scores)
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    b, k = scores.shape
    if labels.shape != (b, k - 1):
        raise ValueError(f"labels shape {labels.shape}, expected {(b, k - 1)}")
    fg = scores[:, 1:]
    per = softplus(fg) - labels * fg
    loss = float(per.sum()) / (b * (k - 1))
    grad = np.zeros_like(scores)
    grad[:, 1:] = (sigmoid(fg) - labels) / (b * (k - 1))
    return loss, grad

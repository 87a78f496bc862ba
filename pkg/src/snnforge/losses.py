"""Loss functions shared by conventional training and spiking fine-tuning.

Both losses average over every output position so their scale does not
depend on image size or batch size.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def softmax_channels(logits: Tensor) -> Tensor:
    """Channel-axis softmax of an N x C x H x W array, numerically shifted."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean per-pixel categorical cross entropy and its gradient wrt logits.

    labels is an integer class map of shape N x H x W with values in
    [0, C).  Returns (loss, grad) where grad has the logits' shape.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be N x C x H x W, got rank {logits.ndim}")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {(n, h, w)}"
        )
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(
            f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]"
        )
    probs = softmax_channels(logits)
    count = n * h * w
    ni, hi, wi = np.ogrid[:n, :h, :w]
    picked = probs[ni, labels, hi, wi]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs.copy()
    grad[ni, labels, hi, wi] -= 1.0
    return loss, grad / count


def mean_abs_error(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Mean absolute error and its (sign-based) gradient wrt pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} does not match target {target.shape}"
        )
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad

"""Segmentation and image-quality metrics.

Segmentation scores come from one confusion matrix; F1 and Jaccard collapse
the maps to foreground (label > 0) versus background, accuracy and mean IoU
are computed over all classes.  PSNR and SSIM follow the usual defaults
(SSIM: 11x11 Gaussian window, sigma 1.5).  Every metric has a plain-loop
reference implementation in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

PSNR_CAP = 99.0


@dataclass(frozen=True)
class SegScores:
    f1: float
    js: float
    acc: float
    miou: float


@dataclass(frozen=True)
class ImageScores:
    psnr: float
    ssim: float


def confusion_matrix(pred: Tensor, truth: Tensor, num_classes: int) -> Tensor:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(
            f"prediction has {pred.size} elements but truth has {truth.size}"
        )
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ShapeError(
                f"{name} labels must lie in [0, {num_classes}), "
                f"got range [{arr.min()}, {arr.max()}]"
            )
    counts = np.bincount(
        truth.astype(np.int64) * num_classes + pred.astype(np.int64),
        minlength=num_classes * num_classes,
    )
    return counts.reshape(num_classes, num_classes)


def scores_from_confusion(conf: Tensor) -> SegScores:
    conf = np.asarray(conf, dtype=np.float64)
    num_classes = conf.shape[0]
    total = conf.sum()
    acc = float(np.trace(conf) / total) if total else 1.0

    # Foreground = any class above 0; for two classes this is class 1.
    tp = conf[1:, 1:].sum()
    fp = conf[0, 1:].sum()
    fn = conf[1:, 0].sum()
    f1_den = 2 * tp + fp + fn
    js_den = tp + fp + fn
    f1 = float(2 * tp / f1_den) if f1_den else 1.0
    js = float(tp / js_den) if js_den else 1.0

    ious = []
    for c in range(num_classes):
        inter = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - inter
        if union > 0:
            ious.append(inter / union)
    miou = float(np.mean(ious)) if ious else 1.0
    return SegScores(f1=f1, js=js, acc=acc, miou=miou)


def seg_scores(pred: Tensor, truth: Tensor, num_classes: int) -> SegScores:
    """F1, Jaccard, accuracy and mean IoU of an integer label map pair.

    Classes absent from both maps do not enter the IoU mean.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    return scores_from_confusion(confusion_matrix(pred, truth, num_classes))


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 (exact match included)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(peak * peak / mse)))


def _gaussian_window(size: int, sigma: float) -> Tensor:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(
    a: Tensor,
    b: Tensor,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity over all fully interior Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("ssim expects 2-D grayscale images")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(
            f"image {a.shape} is smaller than the {window}x{window} ssim window"
        )
    win = _gaussian_window(window, sigma)
    aw = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    bw = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = np.tensordot(aw, win, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(bw, win, axes=([2, 3], [0, 1]))
    var_a = np.tensordot(aw * aw, win, axes=([2, 3], [0, 1])) - mu_a * mu_a
    var_b = np.tensordot(bw * bw, win, axes=([2, 3], [0, 1])) - mu_b * mu_b
    cov = np.tensordot(aw * bw, win, axes=([2, 3], [0, 1])) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_scores(a: Tensor, b: Tensor, peak: float = 1.0) -> ImageScores:
    return ImageScores(psnr=psnr(a, b, peak), ssim=ssim(a, b, peak=peak))

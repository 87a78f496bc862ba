"""Loss values against per-pixel loops and gradients against finite differences."""

import numpy as np
import pytest

from snnforge.errors import ShapeError
from snnforge.losses import cross_entropy, mean_abs_error, softmax_channels


def cross_entropy_loops(logits, labels):
    n, c, h, w = logits.shape
    total = 0.0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                z = logits[b, :, i, j]
                z = z - z.max()
                p = np.exp(z) / np.exp(z).sum()
                total += -np.log(p[labels[b, i, j]])
    return total / (n * h * w)


def test_softmax_channels_normalizes(rng):
    x = rng.standard_normal((2, 5, 3, 4)) * 30
    p = softmax_channels(x)
    assert (p > 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)


def test_cross_entropy_matches_loops(rng):
    logits = rng.standard_normal((2, 3, 4, 5))
    labels = rng.integers(0, 3, size=(2, 4, 5))
    loss, _ = cross_entropy(logits, labels)
    assert np.isclose(loss, cross_entropy_loops(logits, labels), rtol=1e-12)


def test_cross_entropy_uniform_logits_is_log_c():
    logits = np.zeros((1, 4, 2, 2))
    labels = np.zeros((1, 2, 2), dtype=int)
    loss, grad = cross_entropy(logits, labels)
    assert np.isclose(loss, np.log(4.0), rtol=1e-12)
    # per-pixel gradient sums to zero across channels
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_cross_entropy_gradient_finite_differences(rng):
    logits = rng.standard_normal((1, 3, 3, 3))
    labels = rng.integers(0, 3, size=(1, 3, 3))
    _, grad = cross_entropy(logits, labels)
    eps = 1e-6
    flat = logits.ravel()
    for i in rng.choice(flat.size, size=12, replace=False):
        orig = flat[i]
        flat[i] = orig + eps
        hi, _ = cross_entropy(logits, labels)
        flat[i] = orig - eps
        lo, _ = cross_entropy(logits, labels)
        flat[i] = orig
        assert abs((hi - lo) / (2 * eps) - grad.ravel()[i]) < 1e-8


def test_cross_entropy_validation(rng):
    logits = rng.standard_normal((1, 3, 2, 2))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.zeros((1, 2, 3), dtype=int))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.full((1, 2, 2), 3))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.full((1, 2, 2), -1))
    with pytest.raises(ShapeError):
        cross_entropy(logits[0], np.zeros((2, 2), dtype=int))


def test_mean_abs_error_value_and_grad(rng):
    pred = np.array([[1.0, -2.0], [0.5, 3.0]])
    target = np.array([[0.0, -2.0], [1.5, 1.0]])
    loss, grad = mean_abs_error(pred, target)
    assert np.isclose(loss, (1.0 + 0.0 + 1.0 + 2.0) / 4)
    np.testing.assert_allclose(grad, np.array([[1.0, 0.0], [-1.0, 1.0]]) / 4)


def test_mean_abs_error_gradient_finite_differences(rng):
    pred = rng.standard_normal((2, 1, 4, 4))
    target = rng.standard_normal((2, 1, 4, 4))
    _, grad = mean_abs_error(pred, target)
    eps = 1e-7
    flat = pred.ravel()
    for i in rng.choice(flat.size, size=10, replace=False):
        if abs(flat[i] - target.ravel()[i]) < 1e-3:
            continue  # kink of |x|; the subgradient is not two-sided there
        orig = flat[i]
        flat[i] = orig + eps
        hi, _ = mean_abs_error(pred, target)
        flat[i] = orig - eps
        lo, _ = mean_abs_error(pred, target)
        flat[i] = orig
        assert abs((hi - lo) / (2 * eps) - grad.ravel()[i]) < 1e-8


def test_mean_abs_error_shape_check(rng):
    with pytest.raises(ShapeError):
        mean_abs_error(rng.standard_normal((2, 3)), rng.standard_normal((3, 2)))

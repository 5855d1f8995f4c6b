"""Loss primitives with analytic gradients, plus delta normalization.

Every loss returns ``(value, gradient)`` so the training loop never needs
autodiff. Gradients are exact and checked against finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class NormStats:
    """Per-component mean/std used to normalize regression deltas."""

    mu: np.ndarray = field(default_factory=lambda: np.zeros(4))
    sigma: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != (4,) or self.sigma.shape != (4,):
            raise ValueError("NormStats expects 4-vectors")
        if not (np.all(np.isfinite(self.sigma)) and np.all(self.sigma > 0)):
            raise ValueError("sigma components must be positive and finite")


def normalize(deltas: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(deltas, dtype=np.float64) - stats.mu) / stats.sigma


def denormalize(deltas: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(deltas, dtype=np.float64) * stats.sigma + stats.mu


def smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.

    Returns (value, derivative); both are continuous at |x| = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    absx = np.abs(x)
    inner = absx < 1.0
    value = np.where(inner, 0.5 * x * x, absx - 0.5)
    deriv = np.where(inner, x, np.sign(x))
    return value, deriv


def loc_loss(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth-L1 localization loss summed over the 4 delta components.

    Accepts (..., 4) arrays; returns (loss of shape (...), grad wrt pred
    of shape (..., 4)). Batch averaging is the caller's job.
    """
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    value, deriv = smooth_l1(diff)
    return value.sum(axis=-1), deriv


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax via max-shifted exponentials."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy of softmax(logits) against integer labels.

    logits: (..., K); labels: integer array of shape (...).
    Returns (loss (...), grad wrt logits (..., K)). Computed with a
    max-shifted log-sum-exp, stable for logit magnitudes up to ~1e3.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1))
    label_logit = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    loss = lse - label_logit
    grad = softmax(z)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return loss, grad - onehot

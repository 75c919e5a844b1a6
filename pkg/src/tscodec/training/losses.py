"""Loss terms.  Each returns ``(value, gradient w.r.t. the prediction)``."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class LossWeights:
    alpha: float = 0.5  # MSE share of the reconstruction term; 1 - alpha goes to smooth-L1
    eta: float = 1.0  # commitment
    gamma: float = 0.01  # adversarial
    huber_delta: float = 1.0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eta < 0 or self.gamma < 0:
            raise ConfigError("eta and gamma must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")
        return self


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {a.shape} vs {b.shape}")


def mse(target, pred):
    _same_shape(target, pred, "mse")
    d = pred - target
    return float(np.mean(d * d)), 2.0 * d / d.size


def smooth_l1(target, pred, delta=1.0):
    """Quadratic ``0.5 d^2 / delta`` inside ``|d| < delta``, linear ``|d| - delta/2`` outside."""
    _same_shape(target, pred, "smooth_l1")
    d = pred - target
    ad = np.abs(d)
    inner = ad < delta
    value = np.where(inner, 0.5 * d * d / delta, ad - 0.5 * delta)
    grad = np.where(inner, d / delta, np.sign(d))
    return float(value.mean()), grad / d.size


def reconstruction_loss(target, pred, weights):
    lm, gm = mse(target, pred)
    ls, gs = smooth_l1(target, pred, weights.huber_delta)
    a = weights.alpha
    return a * lm + (1 - a) * ls, a * gm + (1 - a) * gs


def _sigmoid(g):
    e = np.exp(-np.abs(g))
    return np.where(g >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw scores, in the overflow-free form
    ``max(g, 0) - g*y + log(1 + exp(-|g|))``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.shape)
    if np.any((targets != 0) & (targets != 1)):
        raise ValueError("targets must be 0 or 1")
    value = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = (_sigmoid(logits) - targets) / logits.size
    return float(value.mean()), grad


def adversarial_loss(logits, targets):
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"adversarial loss: logits {logits.shape} vs targets {targets.shape}")
    return bce_with_logits(logits, targets)[0]

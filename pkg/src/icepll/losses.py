"""Softmax, cross-entropy and focal loss over soft label vectors.

All functions accept a single sample (1-D arrays) or a batch (2-D arrays,
one row per sample). Losses use the natural log and clamp probabilities
to ``[EPS, 1 - EPS]`` before taking it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

EPS = 1e-12


class LossError(ValueError):
    pass


class EmptyClass(LossError):
    pass


class LengthMismatch(LossError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Which loss to use.

    ``kind`` is ``"cce"`` or ``"focal"``. ``alpha``/``gamma`` are ignored for
    CCE. ``class_weights`` multiplies each class term inside the sum.
    """

    kind: str = "cce"
    alpha: float = 1.0
    gamma: float = 0.0
    class_weights: Optional[tuple] = field(default=None)

    def __post_init__(self):
        if self.kind not in ("cce", "focal"):
            raise LossError(f"unknown loss kind {self.kind!r}")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise LossError(f"gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None:
            w = tuple(float(x) for x in self.class_weights)
            if any(not x > 0 for x in w):
                raise LossError("class weights must all be positive")
            object.__setattr__(self, "class_weights", w)

    @classmethod
    def cce(cls, class_weights=None) -> "LossConfig":
        return cls("cce", class_weights=class_weights)

    @classmethod
    def focal(cls, alpha: float, gamma: float, class_weights=None) -> "LossConfig":
        return cls("focal", alpha=alpha, gamma=gamma, class_weights=class_weights)

    def with_weights(self, weights) -> "LossConfig":
        return LossConfig(self.kind, self.alpha, self.gamma,
                          None if weights is None else tuple(weights))

    @property
    def effective_alpha(self) -> float:
        return 1.0 if self.kind == "cce" else self.alpha

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.kind == "cce" else self.gamma

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(d.get("kind", "cce"), float(d.get("alpha", 1.0)), float(d.get("gamma", 0.0)),
                   d.get("class_weights"))


def softmax(z):
    """Row-wise softmax with max-shift, clamped to ``[EPS, 1 - EPS]``."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.clip(p, EPS, 1.0 - EPS)


def _terms(p, y, alpha, gamma, weights):
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    t = -np.log(p) * y
    if gamma != 0:
        t = t * (1.0 - p) ** gamma
    t = alpha * t
    if weights is not None:
        t = t * np.asarray(weights, dtype=np.float64)
    return t


def cross_entropy(p, y):
    return _terms(p, y, 1.0, 0.0, None).sum(axis=-1)


def focal_loss(p, y, alpha: float, gamma: float):
    return _terms(p, y, alpha, gamma, None).sum(axis=-1)


def apply_class_weights(p, y, config: LossConfig):
    """Loss with ``W_i`` multiplying the i-th class term before summation."""
    return _terms(p, y, config.effective_alpha, config.effective_gamma,
                  config.class_weights).sum(axis=-1)


def sample_loss(z, y, config: LossConfig):
    """Per-sample loss from logits."""
    return apply_class_weights(softmax(z), y, config)


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``n / (l * n_j)``."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise LossError("class counts must be nonnegative")
    if np.any(counts == 0):
        raise EmptyClass(f"class(es) {np.flatnonzero(counts == 0).tolist()} have no samples")
    n = counts.sum()
    return n / (len(counts) * counts.astype(np.float64))


def loss_gradient(z, y, config: LossConfig):
    """Gradient of the per-sample loss with respect to the logits.

    With ``g_i = dL/dp_i`` and ``t_i = p_i g_i`` the softmax Jacobian gives
    ``dL/dz_k = t_k - p_k * sum_i t_i``.
    """
    p = softmax(z)
    y = np.asarray(y, dtype=np.float64)
    a, g = config.effective_alpha, config.effective_gamma
    logp = np.log(p)
    one_m = 1.0 - p
    if g == 0:
        t = -y
    else:
        t = -y * (one_m ** g - g * p * one_m ** (g - 1.0) * logp)
    t = a * t
    if config.class_weights is not None:
        t = t * np.asarray(config.class_weights)
    return t - p * t.sum(axis=-1, keepdims=True)


def batch_loss(logits_batch, labels_batch, config: LossConfig) -> float:
    """Mean of per-sample losses; summation order is fixed (numpy pairwise)."""
    z = np.asarray(logits_batch, dtype=np.float64)
    y = np.asarray(labels_batch, dtype=np.float64)
    if z.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{z.shape[0]} logits rows vs {y.shape[0]} label rows")
    if z.shape[0] == 0:
        raise LengthMismatch("empty batch")
    return float(np.mean(sample_loss(z, y, config)))


def batch_loss_and_grad(logits_batch, labels_batch, config: LossConfig):
    """Mean loss and its gradient w.r.t. every logit row (already divided by batch size)."""
    z = np.asarray(logits_batch, dtype=np.float64)
    y = np.asarray(labels_batch, dtype=np.float64)
    if z.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{z.shape[0]} logits rows vs {y.shape[0]} label rows")
    n = z.shape[0]
    loss = float(np.mean(sample_loss(z, y, config)))
    return loss, loss_gradient(z, y, config) / n

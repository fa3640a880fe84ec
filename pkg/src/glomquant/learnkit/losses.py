"""Focal loss and the SimSiam negative-cosine objective with analytic gradients."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError, DegenerateEmbeddingError, ShapeError

PROB_FLOOR = 1e-12
DEFAULT_GAMMA = 2.5


@dataclass
class FocalLossParams:
    gamma: float = DEFAULT_GAMMA
    class_weights: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if (self.class_weights <= 0).any():
                raise ConfigError("class weights must be positive")

    def weight(self, target):
        if self.class_weights is None:
            return 1.0
        return self.class_weights[target]

    @classmethod
    def inverse_frequency(cls, counts, gamma=DEFAULT_GAMMA):
        """Weights proportional to 1 / class count, normalized to mean 1."""
        c = np.asarray(counts, dtype=np.float64)
        if (c <= 0).any():
            raise ConfigError("every class needs a positive count")
        w = 1.0 / c
        return cls(gamma, w * len(w) / w.sum())


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _focal_terms(p_t, gamma):
    """Loss factor ``-(1-p)^g log p`` and ``d loss / d log-odds`` scale at p_t."""
    q = 1.0 - p_t
    log_p = np.log(p_t)
    loss = -(q**gamma) * log_p
    # dL/dp_t * p_t, written so p_t -> 1 stays finite.
    if gamma == 0:
        dlogp = -np.ones_like(p_t)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            first = np.where(q > 0, gamma * q ** (gamma - 1) * p_t * log_p, 0.0)
        dlogp = first - q**gamma
    return loss, dlogp


def focal_loss(probs, target, params=None):
    """Focal loss of one sample and its gradient w.r.t. the pre-softmax logits."""
    params = params or FocalLossParams()
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("probs must be a 1-D vector")
    if not (0 <= target < p.size):
        raise IndexError(f"target {target} out of range for {p.size} classes")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, expected 1")
    p = np.maximum(p, PROB_FLOOR)
    w = params.weight(target)
    loss, dlogp = _focal_terms(p[target], params.gamma)
    onehot = np.zeros_like(p)
    onehot[target] = 1.0
    grad = w * dlogp * (onehot - p)
    return float(w * loss), grad


def focal_loss_batch(logits, targets, params=None):
    """Mean focal loss over a batch and its gradient w.r.t. ``logits`` (B, K)."""
    params = params or FocalLossParams()
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    b = logits.shape[0]
    p = np.maximum(softmax(logits), PROB_FLOOR)
    p_t = p[np.arange(b), targets]
    w = np.ones(b) if params.class_weights is None else params.class_weights[targets]
    loss, dlogp = _focal_terms(p_t, params.gamma)
    onehot = np.zeros_like(p)
    onehot[np.arange(b), targets] = 1.0
    grad = (w * dlogp)[:, None] * (onehot - p) / b
    return float(np.mean(w * loss)), grad


def _cos_and_grad(p, z):
    """cos(p, z) and its gradient w.r.t. ``p`` along the last axis."""
    pn = np.linalg.norm(p, axis=-1, keepdims=True)
    zn = np.linalg.norm(z, axis=-1, keepdims=True)
    if (pn == 0).any() or (zn == 0).any():
        raise DegenerateEmbeddingError("zero-norm embedding")
    cos = np.sum(p * z, axis=-1, keepdims=True) / (pn * zn)
    grad = z / (pn * zn) - cos * p / (pn * pn)
    return cos[..., 0], grad


def simsiam_loss(z1, z2, p1, p2):
    """Symmetric negative cosine with stop-gradient on the targets.

    Returns ``(loss, grads)`` where ``grads`` maps ``p1, p2, z1, z2`` to
    arrays; the ``z`` entries are identically zero.
    """
    z1, z2, p1, p2 = (np.asarray(v, dtype=np.float64) for v in (z1, z2, p1, p2))
    if not (z1.shape == z2.shape == p1.shape == p2.shape):
        raise ShapeError("z1, z2, p1, p2 must share a shape")
    c1, g1 = _cos_and_grad(p1, z2)
    c2, g2 = _cos_and_grad(p2, z1)
    loss = float(np.mean(-0.5 * c1 - 0.5 * c2))
    n = c1.size
    grads = {
        "p1": -0.5 * g1 / n,
        "p2": -0.5 * g2 / n,
        "z1": np.zeros_like(z1),
        "z2": np.zeros_like(z2),
    }
    return loss, grads


def negative_cosine_full(z1, z2, p1, p2):
    """Same objective as :func:`simsiam_loss` but differentiating through ``z``.

    This is the collapse-prone variant used as the no-stop-gradient control.
    """
    loss, grads = simsiam_loss(z1, z2, p1, p2)
    z1, z2, p1, p2 = (np.asarray(v, dtype=np.float64) for v in (z1, z2, p1, p2))
    n = z1.size // z1.shape[-1]
    _, gz2 = _cos_and_grad(z2, p1)
    _, gz1 = _cos_and_grad(z1, p2)
    grads["z1"] = -0.5 * gz1 / n
    grads["z2"] = -0.5 * gz2 / n
    return loss, grads

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

REFERENCE_BATCH = 256


@dataclass(frozen=True)
class CosineSchedule:
    """Linearly scaled base rate (``base_lr * batch_size / 256``) with cosine decay to zero."""

    base_lr: float = 0.05
    batch_size: int = 64
    total_steps: int = 1000

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.base_lr < 0:
            raise ConfigError("schedule needs total_steps >= 1, batch_size >= 1, base_lr >= 0")

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / REFERENCE_BATCH

    def __call__(self, step) -> float:
        t = min(max(step, 0), self.total_steps)
        return self.effective_lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))


class MomentumSGD:
    """Heavy-ball SGD with coupled L2 weight decay, applied in place.

    ``v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v``
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        for k, w in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * w
            buf = self.buffers[k]
            buf *= self.momentum
            buf += g
            w -= lr * buf

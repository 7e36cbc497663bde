"""Adaptive-moment optimizer with a stepped learning-rate decay."""
from __future__ import annotations

import numpy as np

from .nn import Parameter


class Adam:
    """Adam over the non-frozen parameters handed in.

    The learning rate halves (or scales by `decay_factor`) every
    `decay_every` epochs: after k decay events the effective rate is
    `lr * decay_factor**k`. Call `set_epoch` at each epoch boundary.
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, decay_factor: float = 0.5,
                 decay_every: int = 5):
        if not 0.0 < decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {decay_factor}")
        if decay_every < 0:
            raise ValueError(f"decay_every must be >= 0, got {decay_every}")
        self.params: list[Parameter] = [p for p in params if not p.frozen]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.step_count = 0
        self.decay_events = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def set_epoch(self, epoch: int) -> None:
        if self.decay_every > 0:
            self.decay_events = epoch // self.decay_every

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay_factor ** self.decay_events

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        lr = self.effective_lr
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

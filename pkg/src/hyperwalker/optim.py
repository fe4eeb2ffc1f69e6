"""Minimal Adam/AdamW over dictionaries of numpy arrays."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    Parameters are updated in place and keep their dtype; moment estimates
    are kept in float64. A tensor whose gradient is identically zero is
    treated as disconnected from the loss and left untouched, including by
    weight decay.
    """

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], maximize: bool = False) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if not np.any(g):
                continue
            if maximize:
                g = -g
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w = p.astype(np.float64)
            if self.weight_decay:
                w = w - self.lr * self.weight_decay * w
            w = w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = w.astype(p.dtype)

"""Adam optimizer over named parameter dicts (deterministic step order)."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = {k: t for k, t in params.items() if t.requires_grad}
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for key, t in self.params.items():
            g = t.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {key!r}")
            m = self.m[key]
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

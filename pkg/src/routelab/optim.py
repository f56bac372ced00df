"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``min(1, max_norm / ||g||)``; returns the clipped dict and the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm
    return dict(grads), norm


def decay_matrices(name: str, value: np.ndarray) -> bool:
    return value.ndim >= 2


class AdamW:
    def __init__(self, lr: float = 3e-4, weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, decay: Callable[[str, np.ndarray], bool] = decay_matrices):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay = decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of the tensors named in ``grads``."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p - self.lr * update
            if self.weight_decay and self.decay(name, p):
                new = new - self.lr * self.weight_decay * p
            out[name] = new.astype(p.dtype)
        return out

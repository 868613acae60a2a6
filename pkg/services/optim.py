"""AdamW with decoupled weight decay, global-norm clipping and cosine annealing."""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

NamedArray = Tuple[str, np.ndarray]


def cosine_lr(epoch: int, epochs: int, lr: float, final_lr: float) -> float:
    """Learning rate at ``epoch`` (0-based); reaches ``final_lr`` on the last epoch."""
    progress = epoch / max(epochs - 1, 1)
    return final_lr + 0.5 * (lr - final_lr) * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scales gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


class AdamW:
    def __init__(
        self,
        params: Sequence[NamedArray],
        weight_decay: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.names: List[str] = [name for name, _ in params]
        self.params: Dict[str, np.ndarray] = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(value) for name, value in self.params.items()}
        self._v = {name: np.zeros_like(value) for name, value in self.params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name in self.names:
            param = self.params[name]
            grad = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param *= 1.0 - lr * self.weight_decay
            param -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

"""Adam with bias correction plus a step-decay schedule."""

from __future__ import annotations

import numpy as np

from .nn import Parameter
from .tensor import NonFiniteError


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards.

    A parameter without a gradient is treated as having a zero gradient, so
    its step count still advances.
    """
    params = list(params)
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or p.shape}")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        p.grad = None


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 4e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_decay(base_lr: float, epoch: int, factor: float = 0.1, every: int = 2) -> float:
    """Learning rate for a zero-based epoch under step decay."""
    return base_lr * factor ** (epoch // every)

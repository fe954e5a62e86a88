from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradcheckReport:
    max_rel_error: list[float]
    tolerance: float
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(fn, inputs: list[Tensor], index: int, eps: float = 1e-5) -> np.ndarray:
    target = inputs[index]
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn(*inputs).data)
        flat[i] = orig - eps
        minus = float(fn(*inputs).data)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def gradcheck(fn, inputs, tolerance: float = 1e-4, eps: float = 1e-5, floor: float = 1e-6) -> GradcheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Inputs are converted to float64 copies; the report holds one max relative
    error per input and never raises on mismatch.
    """
    with precision(np.float64):
        tensors = [Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                          requires_grad=True) for t in inputs]
        out = fn(*tensors)
        if out.size != 1:
            raise ValueError("gradcheck needs a scalar-valued function")
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        frozen = [Tensor(t.data.copy()) for t in tensors]
        errors, failures = [], []
        for i, a in enumerate(analytic):
            n = numeric_gradient(fn, frozen, i, eps)
            err = relative_error(a, n, floor)
            errors.append(err)
            if not err < tolerance:
                failures.append(f"input {i}: max relative error {err:.3e} >= {tolerance:.1e}")
    return GradcheckReport(errors, tolerance, failures)

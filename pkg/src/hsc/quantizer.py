"""Scalar soft-to-hard quantization.

Forward: every latent element snaps to its nearest codebook center.
Backward: gradients follow the soft assignment

    y_soft = sum_j softmax_j(-sigma * |y - c_j|) * c_j

so both the latents and the centers are trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Parameter, Tensor
from .autodiff.tensor import NonFiniteError, check_finite, make_node


class Codebook(Module):
    """Learnable scalar centers plus the softness used on the backward path."""

    def __init__(self, centers, sigma: float = 1.0, codebook_id: int = 0):
        centers = np.asarray(centers, dtype=np.float64).reshape(-1)
        if centers.size < 2:
            raise ValueError("a codebook needs at least two centers")
        if len(np.unique(centers)) != centers.size:
            raise ValueError("codebook centers must be pairwise distinct")
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.centers = Parameter(centers)
        self.sigma = float(sigma)
        self.codebook_id = codebook_id

    @classmethod
    def uniform(cls, levels: int = 6, low: float = -2.0, high: float = 2.0, **kw) -> "Codebook":
        return cls(np.linspace(low, high, levels), **kw)

    @property
    def levels(self) -> int:
        return self.centers.size

    def values(self) -> np.ndarray:
        return self.centers.data


@dataclass
class QuantizedLatent:
    symbols: np.ndarray
    codebook_id: int
    dequantized: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.symbols.shape


def nearest_symbols(values: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center; argmin keeps the lowest index on ties."""
    dist = np.abs(np.asarray(values)[..., None] - np.asarray(centers))
    return np.argmin(dist, axis=-1)


def quantize_forward(latent, codebook: Codebook) -> QuantizedLatent:
    data = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    check_finite(data, "quantize_forward")
    centers = codebook.values()
    symbols = nearest_symbols(data, centers)
    return QuantizedLatent(symbols, codebook.codebook_id, centers[symbols].astype(data.dtype))


def dequantize(symbols: np.ndarray, codebook: Codebook) -> np.ndarray:
    return codebook.values()[np.asarray(symbols)]


def _soft_weights(y: np.ndarray, centers: np.ndarray, sigma: float):
    signed = y[..., None] - centers
    logits = -sigma * np.abs(signed)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w, np.sign(signed)


def soft_values(latent: np.ndarray, codebook: Codebook) -> np.ndarray:
    w, _ = _soft_weights(np.asarray(latent), codebook.values(), codebook.sigma)
    return (w * codebook.values()).sum(axis=-1)


def quantize_backward(latent, codebook: Codebook, upstream_grad):
    """Gradients of the soft assignment w.r.t. the latent and the centers."""
    y = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    g = np.asarray(upstream_grad)
    c = codebook.values()
    w, sign = _soft_weights(y, c, codebook.sigma)
    soft = (w * c).sum(axis=-1, keepdims=True)
    dsoft_dlogit = w * (c - soft)  # d soft / d logit_j
    sigma = codebook.sigma
    grad_latent = g * (dsoft_dlogit * (-sigma * sign)).sum(axis=-1)
    per_center = w + dsoft_dlogit * (sigma * sign)
    grad_centers = (g[..., None] * per_center).reshape(-1, c.size).sum(axis=0)
    if not (np.isfinite(grad_latent).all() and np.isfinite(grad_centers).all()):
        raise NonFiniteError("quantize_backward produced a non-finite gradient")
    return grad_latent, grad_centers


def soft_quantize(latent: Tensor, codebook: Codebook) -> Tensor:
    """Hard centers forward, soft-assignment gradient backward."""
    hard = quantize_forward(latent, codebook)

    def backward(g):
        gl, gc = quantize_backward(latent, codebook, g)
        return gl.astype(latent.dtype), gc.astype(codebook.centers.dtype)

    out = make_node(hard.dequantized, (latent, codebook.centers), backward, "soft_quantize")
    return out


def soft_relaxation(latent: Tensor, codebook: Codebook) -> Tensor:
    """The soft assignment itself, composed from primitives (used to check the fused backward)."""
    from .autodiff import ops

    c = codebook.centers
    diff = ops.sub(latent.reshape(*latent.shape, 1), c)
    dist = ops.abs_(diff)
    w = ops.softmax(dist * (-codebook.sigma), axis=-1)
    return ops.sum_(w * c, axis=-1)


def symbols_of(latent: Tensor, codebook: Codebook) -> np.ndarray:
    return nearest_symbols(latent.data, codebook.values())

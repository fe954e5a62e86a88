"""Differentiable primitives.

Each function takes Tensors (or array-likes for non-differentiable inputs),
computes the forward value with numpy and registers a backward closure.
Images and feature maps are NCHW; 3-D volumes are NCDHW.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, ensure_tensor, make_node


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = ensure_tensor(a, b if isinstance(b, Tensor) else None)
    b = ensure_tensor(b, a)
    return a, b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_node(out, (a,), backward, "pow")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_node(out, (a,), lambda g: (g * sig,), "softplus")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = np.where(keep, a.data, 0).astype(a.dtype)
    return make_node(out, (a,), lambda g: (g * keep,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    keep = a.data > 0
    out = np.where(keep, a.data, slope * a.data).astype(a.dtype)
    return make_node(out, (a,), lambda g: (np.where(keep, g, slope * g),), "leaky_relu")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed only strictly inside the interval."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return make_node(out, (a,), lambda g: (g * inside,), "clamp")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor) with a zero gradient wherever the floor wins."""
    above = a.data > floor
    out = np.where(above, a.data, floor).astype(a.dtype)
    return make_node(out, (a,), lambda g: (g * above,), "maximum")


def ceil_ste(a: Tensor) -> Tensor:
    """Ceiling in the forward pass, identity gradient in the backward pass."""
    return make_node(np.ceil(a.data), (a,), lambda g: (g,), "ceil_ste")


# -- reductions and shape ops ---------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return make_node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.size, 1)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return make_node(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return make_node(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out), (a,), backward, "slice")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tuple(tensors), backward, "concat")


def take_along_axis(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate their gradients."""
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        # put_along_axis overwrites, so scatter one index slice at a time
        for j in range(indices.shape[axis]):
            part = np.zeros_like(a.data)
            sl = [slice(None)] * indices.ndim
            sl[axis] = slice(j, j + 1)
            np.put_along_axis(part, indices[tuple(sl)], g[tuple(sl)], axis=axis)
            full += part
        return (full,)

    return make_node(out, (a,), backward, "take_along_axis")


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each spatial element ``factor`` times along the last two axes."""
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        *lead, h, w = g.shape
        g = g.reshape(*lead, h // factor, factor, w // factor, factor)
        return (g.sum(axis=(-3, -1)),)

    return make_node(out, (a,), backward, "upsample_nearest")


# -- linear algebra and normalisation ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward, "softmax")


def channel_norm(a: Tensor, axis: int = 1, eps: float = 1e-10) -> Tensor:
    """Divide every channel vector by its Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (a,), backward, "channel_norm")


def mse(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.dtype)
    scale = 2.0 / diff.size

    def backward(g):
        ga = g * scale * diff
        return ga, -ga

    return make_node(out, (a, b), backward, "mse")


def cross_entropy(probs: Tensor, target, axis: int = -1, reduction: str = "mean") -> Tensor:
    """-sum(target * log(probs)) along ``axis``; ``target`` is one-hot or soft labels."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=probs.dtype)
    if target.shape != probs.shape:
        raise ShapeError(f"target shape {target.shape} != probs shape {probs.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(target != 0, np.log(probs.data), 0.0)
    per_row = -(target * logp).sum(axis=axis)
    if reduction == "none":
        out = per_row
    elif reduction == "sum":
        out = np.asarray(per_row.sum())
    elif reduction == "mean":
        out = np.asarray(per_row.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    count = per_row.size

    def backward(g):
        if reduction == "none":
            g = np.expand_dims(g, axis)
        elif reduction == "mean":
            g = g / count
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(target != 0, -target / probs.data, 0.0)
        return (gp * g,)

    return make_node(out.astype(probs.dtype), (probs,), backward, "cross_entropy")


# -- convolutions -------------------------------------------------------------------

def _check_conv_shapes(x, w, name):
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with an (out, in, kh, kw) kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    _check_conv_shapes(x, w, "conv2d")
    kh, kw = w.shape[2:]
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    ho, wo = out.shape[2:]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution with an (in, out, kh, kw) kernel (the adjoint of conv2d)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-D input and kernel")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    n, _, h, wd = x.shape
    cout, kh, kw = w.shape[1:]
    s, p, op = stride, padding, output_padding
    full_h = (h - 1) * s + kh + op
    full_w = (wd - 1) * s + kw + op
    contrib = np.tensordot(x.data, w.data, axes=([1], [0]))  # N,H,W,Cout,kh,kw
    full = np.zeros((n, cout, full_h, full_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + s * h:s, j:j + s * wd:s] += contrib[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, p:full_h - p, p:full_w - p]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gfull = np.zeros((n, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, p:full_h - p, p:full_w - p] = g
        cols = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :wd]
        gx = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


def masked_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """'Same' 3-D convolution over NCDHW input with an odd cubic kernel.

    ``mask`` has the kernel's shape (or broadcasts to it); masked taps are
    zeroed in the forward pass and receive zero gradient.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("masked_conv3d expects 5-D input and kernel")
    _check_conv_shapes(x, w, "masked_conv3d")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError("masked_conv3d expects an odd cubic kernel")
    r = k // 2
    m = np.ones(w.shape, dtype=w.dtype) if mask is None else np.broadcast_to(mask, w.shape).astype(w.dtype)
    weff = w.data * m
    n, cin, d, h, wd = x.shape
    cout = w.shape[0]
    # channel-major padded input so every tap is a plain (cout, cin) @ (cin, sites) product
    xt = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r), (r, r))).transpose(1, 0, 2, 3, 4).copy()
    taps = [(i, j, l) for i in range(k) for j in range(k) for l in range(k) if m[:, :, i, j, l].any()]
    # BLAS needs contiguous operands; strided kernel slices fall back to a slow loop
    tap_w = {t: np.ascontiguousarray(weff[(slice(None), slice(None)) + t]) for t in taps}
    tap_wt = {t: np.ascontiguousarray(v.T) for t, v in tap_w.items()}

    def window(arr, i, j, l):
        return arr[:, :, i:i + d, j:j + h, l:l + wd]

    acc = np.zeros((cout, n * d * h * wd), dtype=np.result_type(x.data, w.data))
    for i, j, l in taps:
        acc += tap_w[i, j, l] @ window(xt, i, j, l).reshape(cin, -1)
    out = acc.reshape(cout, n, d, h, wd).transpose(1, 0, 2, 3, 4)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        gw = np.zeros_like(w.data)
        gxt = np.zeros_like(xt)
        for i, j, l in taps:
            cols = window(xt, i, j, l).reshape(cin, -1)
            gw[:, :, i, j, l] = (gt @ cols.T) * m[:, :, i, j, l]
            window(gxt, i, j, l)[...] += (tap_wt[i, j, l] @ gt).reshape(cin, n, d, h, wd)
        gx = gxt[:, :, r:r + d, r:r + h, r:r + wd].transpose(1, 0, 2, 3, 4)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(np.ascontiguousarray(out), parents, backward, "masked_conv3d")


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the bottom/right of an NCHW tensor."""
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    h, w = x.shape[2:]

    def backward(g):
        gx = g[:, :, :h, :w].copy()
        if pad_h:
            gx[:, :, h - 1 - pad_h:h - 1, :] += g[:, :, h:, :w][:, :, ::-1, :]
        if pad_w:
            tail = g[:, :, :, w:]
            gx[:, :, :, w - 1 - pad_w:w - 1] += tail[:, :, :h, ::-1]
            if pad_h:
                gx[:, :, h - 1 - pad_h:h - 1, w - 1 - pad_w:w - 1] += tail[:, :, h:, ::-1][:, :, ::-1, :]
        return (gx,)

    return make_node(out, (x,), backward, "pad_reflect")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    blocks = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * size, :wo * size] = gb
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


KINDS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "relu": relu, "leaky_relu": leaky_relu, "channel_norm": channel_norm,
    "softmax": softmax, "cross_entropy": cross_entropy, "mse": mse,
    "mean": mean, "sum": sum_, "concat": concat, "slice": slice_,
    "upsample_nearest": upsample_nearest, "conv2d": conv2d,
    "transposed_conv2d": conv_transpose2d, "masked_conv3d": masked_conv3d,
    "exp": exp, "log": log, "sqrt": sqrt, "clamp": clamp, "maximum": maximum,
    "max_pool2d": max_pool2d,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = KINDS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    return fn(*inputs, **attrs)

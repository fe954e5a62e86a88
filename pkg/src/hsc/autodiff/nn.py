"""Parameters, modules and the layer zoo used by the codec and the metrics."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        super().__init__(arr, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def assign(self, values) -> None:
        values = np.asarray(values)
        if values.shape != self.shape:
            raise ValueError(f"cannot assign shape {values.shape} to parameter of shape {self.shape}")
        self.data = values.astype(self.dtype).copy()

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: parameters and sub-modules are discovered from attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                p.assign(state[name])

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Conv2d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=None, rng=None, gain=1.0):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = Parameter(he_uniform(rng, (cout, cin, kernel, kernel), fan_in, gain))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel=4, stride=2, padding=1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        # each output pixel sees about cin * (kernel/stride)^2 inputs
        fan_in = max(1, cin * (kernel // stride) ** 2)
        self.weight = Parameter(he_uniform(rng, (cin, cout, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResidualBlock(Module):
    """conv-relu-conv with an identity skip; the second conv starts small."""

    def __init__(self, channels, rng=None, branch_gain=0.1):
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, gain=branch_gain)

    def forward(self, x):
        return x + self.conv2(ops.relu(self.conv1(x)))


class SelfAttention(Module):
    """Dot-product attention over flattened spatial positions, projected and added back."""

    def __init__(self, channels, inner=None, rng=None):
        rng = rng or np.random.default_rng(0)
        inner = inner or max(1, channels // 2)
        self.inner = inner
        self.query = Parameter(he_uniform(rng, (inner, channels), channels))
        self.key = Parameter(he_uniform(rng, (inner, channels), channels))
        self.value = Parameter(he_uniform(rng, (inner, channels), channels))
        self.out = Parameter(np.zeros((channels, inner)))

    def forward(self, x):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        q = ops.matmul(self.query, flat)  # n, inner, hw
        k = ops.matmul(self.key, flat)
        v = ops.matmul(self.value, flat)
        scores = ops.matmul(q.transpose(0, 2, 1), k) * (1.0 / math.sqrt(self.inner))  # n, hw, hw
        attn = ops.softmax(scores, axis=-1)
        mixed = ops.matmul(v, attn.transpose(0, 2, 1))  # n, inner, hw
        return x + ops.matmul(self.out, mixed).reshape(n, c, h, w)


class MaskedConv3d(Module):
    """3-D convolution whose kernel is multiplied by a fixed binary mask."""

    def __init__(self, cin, cout, mask: np.ndarray, rng=None, zero_init=False):
        rng = rng or np.random.default_rng(0)
        k = mask.shape[-1]
        self.mask = np.broadcast_to(mask, (cout, cin, k, k, k)).astype(bool)
        fan_in = max(1, int(self.mask[0].sum()))
        init = np.zeros(self.mask.shape) if zero_init else he_uniform(rng, self.mask.shape, fan_in)
        self.weight = Parameter(init * self.mask)
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ops.masked_conv3d(x, self.weight, self.bias, mask=self.mask)


def stack_apply(layers, x):
    for layer in layers:
        x = layer(x)
    return x

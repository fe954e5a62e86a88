"""Randomised finite-difference cases for every differentiable building block.

Each case is (name, scalar function, inputs).  Inputs are drawn away from
kinks (relu at 0, clamp bounds, |x| at 0) so central differences are valid.
"""

import numpy as np

from hsc.autodiff import Tensor, no_grad, ops, precision
from hsc.autodiff.gradcheck import gradcheck, relative_error
from hsc.codec import bounded, importance_head, weighted_distortion
from hsc.metrics import IdentityExtractor, dpl
from hsc.autodiff.nn import Conv2d, Module
from hsc.quantizer import Codebook, soft_quantize, soft_relaxation

TOLERANCE = 1e-4


def _away(rng, shape, gap=0.05, scale=1.0):
    """Normal draws with every |value| >= gap."""
    v = rng.normal(scale=scale, size=shape)
    return np.where(np.abs(v) < gap, np.sign(v + 1e-12) * gap + v, v)


def _case(rng, name, op, inputs):
    """Wrap ``op`` into a scalar by a fixed random projection of its output."""
    with no_grad(), precision(np.float64):
        shape = op(*[Tensor(np.asarray(v, dtype=np.float64)) for v in inputs]).shape
    weights = rng.normal(size=shape)
    return name, (lambda *args: ops.sum_(op(*args) * Tensor(weights))), inputs


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def elementwise_cases(rng):
    s = _shape(rng, 2)
    a, b = rng.normal(size=s), rng.normal(size=s)
    pos = rng.uniform(0.3, 2.0, size=s)
    # clamp inputs sit at least 0.05 away from both bounds
    inside = rng.uniform(-0.45, 0.45, size=s)
    clamp_in = np.where(rng.random(s) < 0.3, np.sign(inside) * 0.6 + inside * 0.1, inside)
    return [
        _case(rng, "add", ops.add, [a, b]),
        _case(rng, "add_broadcast", ops.add, [a, rng.normal(size=(1, s[1]))]),
        _case(rng, "sub", ops.sub, [a, b]),
        _case(rng, "mul", ops.mul, [a, b]),
        _case(rng, "div", ops.div, [a, pos]),
        _case(rng, "power", lambda x: ops.power(x, 3.0), [a]),
        _case(rng, "abs", ops.abs_, [_away(rng, s)]),
        _case(rng, "exp", ops.exp, [a]),
        _case(rng, "log", ops.log, [pos]),
        _case(rng, "sqrt", ops.sqrt, [pos]),
        _case(rng, "sigmoid", ops.sigmoid, [a]),
        _case(rng, "softplus", ops.softplus, [a]),
        _case(rng, "relu", ops.relu, [_away(rng, s)]),
        _case(rng, "leaky_relu", lambda x: ops.leaky_relu(x, 0.1), [_away(rng, s)]),
        _case(rng, "clamp", lambda x: ops.clamp(x, -0.5, 0.5), [clamp_in]),
        _case(rng, "maximum", lambda x: ops.maximum(x, 0.0), [_away(rng, s)]),
        _case(rng, "neg", ops.neg, [a]),
    ]


def structural_cases(rng):
    s = _shape(rng, 3)
    out = []
    for axis in (None, 0, 2):
        out.append(_case(rng, f"sum_axis{axis}", lambda x, ax=axis: ops.sum_(x, axis=ax), [rng.normal(size=s)]))
        out.append(_case(rng, f"mean_axis{axis}", lambda x, ax=axis: ops.mean(x, axis=ax, keepdims=True),
                         [rng.normal(size=s)]))
    out.append(_case(rng, "reshape", lambda x: ops.reshape(x, (-1,)), [rng.normal(size=s)]))
    out.append(_case(rng, "transpose", lambda x: ops.transpose(x, (2, 0, 1)), [rng.normal(size=s)]))
    out.append(_case(rng, "slice", lambda x: x[:, -1:, ::2], [rng.normal(size=s)]))
    other = (s[0], int(rng.integers(1, 4)), s[2])
    out.append(_case(rng, "concat", lambda x, y: ops.concat([x, y], axis=1),
                     [rng.normal(size=s), rng.normal(size=other)]))
    idx = rng.integers(0, s[1], size=(s[0], 2, s[2]))
    out.append(_case(rng, "take_along_axis", lambda x: ops.take_along_axis(x, idx, axis=1), [rng.normal(size=s)]))
    img = (1, 2) + _shape(rng, 2, 1, 3)
    factor = int(rng.integers(2, 4))
    out.append(_case(rng, "upsample_nearest", lambda x: ops.upsample_nearest(x, factor), [rng.normal(size=img)]))
    m, k, n = _shape(rng, 3)
    out.append(_case(rng, "matmul", ops.matmul, [rng.normal(size=(2, m, k)), rng.normal(size=(k, n))]))
    pooled = (1, 2, 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3)))
    distinct = rng.permutation(int(np.prod(pooled))).reshape(pooled) * 0.1
    out.append(_case(rng, "max_pool2d", lambda x: ops.max_pool2d(x, 2), [distinct]))
    ph, pw = int(rng.integers(0, 3)), int(rng.integers(0, 3))
    out.append(_case(rng, "pad_reflect", lambda x: ops.pad_reflect(x, ph, pw), [rng.normal(size=(1, 2, 4, 4))]))
    return out


def normalisation_cases(rng):
    s = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    target = rng.dirichlet(np.ones(s[1]), size=s[0])
    img = (2, int(rng.integers(1, 5)), 3, 3)
    return [
        _case(rng, "softmax", lambda x: ops.softmax(x, axis=1), [rng.normal(size=s)]),
        ("cross_entropy", lambda p: ops.cross_entropy(p, target, axis=1), [rng.dirichlet(np.ones(s[1]), size=s[0])]),
        ("mse", ops.mse, [rng.normal(size=s), rng.normal(size=s)]),
        _case(rng, "channel_norm", lambda x: ops.channel_norm(x, axis=1), [rng.normal(size=img)]),
    ]


def conv_cases(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    h = int(rng.integers(3, 6))
    out = [_case(rng, "conv2d", lambda a, w, b: ops.conv2d(a, w, b, stride=stride, padding=k // 2),
                 [rng.normal(size=(1, cin, h, h)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)])]
    hin = int(rng.integers(1, 4))
    out.append(_case(rng, "transposed_conv2d", lambda a, w, b: ops.conv_transpose2d(a, w, b, stride=2, padding=1),
                     [rng.normal(size=(1, cin, hin, hin)), rng.normal(size=(cin, cout, 4, 4)), rng.normal(size=cout)]))
    mask = rng.random((cout, cin, 3, 3, 3)) < 0.6
    out.append(_case(rng, "masked_conv3d", lambda a, w, b: ops.masked_conv3d(a, w, b, mask=mask),
                     [rng.normal(size=(1, cin, 2, 3, 3)), rng.normal(size=(cout, cin, 3, 3, 3)) * mask,
                      rng.normal(size=cout)]))
    return out


class SmoothExtractor(Module):
    """Multi-tap conv features with softplus activations.

    ReLU features put exact zeros under the channel normalisation, where a
    finite-difference step lands on a kink, so the check uses a smooth stack
    with the same tap layout.
    """

    def __init__(self, rng, channels=(3, 4, 4)):
        self.blocks = []
        cin = 3
        for i, cout in enumerate(channels):
            self.blocks.append(Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, rng=rng))
            cin = cout
        self.channels = tuple(channels)

    @property
    def taps(self):
        return list(enumerate(self.channels))

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = ops.softplus(block(x))
            feats.append(x)
        return feats


def codec_cases(rng):
    s = (1, int(rng.integers(2, 5)), 2, 2)
    n = int(rng.integers(1, 3))
    hw = 8 * int(rng.integers(1, 3))
    x, xhat = rng.uniform(size=(n, 3, hw, hw)), rng.uniform(size=(n, 3, hw, hw))
    sal = rng.integers(0, 2, size=(n, hw // 8, hw // 8))
    w1 = float(rng.uniform(0.5, 1.0))
    ident = IdentityExtractor()
    small = SmoothExtractor(rng).to(np.float64)
    img = (int(rng.integers(1, 3)), 3, 8, 8)
    weights = [rng.uniform(0.1, 2.0, size=c) for _, c in small.taps]
    return [
        _case(rng, "bounded", bounded, [rng.normal(scale=2.0, size=s)]),
        _case(rng, "importance_head", importance_head, [rng.normal(size=s)]),
        ("dpl_identity", lambda a, b: dpl(a, b, ident), [x, xhat]),
        ("dpl_features", lambda a, b: dpl(a, b, small, weights), [rng.uniform(size=img), rng.uniform(size=img)]),
        ("weighted_distortion_mse", lambda a, b: weighted_distortion(a, b, sal, w1, 1.0 - w1), [x, xhat]),
        ("weighted_distortion_dpl", lambda a, b: weighted_distortion(
            a, b, sal, w1, 1.0 - w1, lambda p, q: dpl(p, q, ident)), [x, xhat]),
    ]


def all_cases(seed):
    rng = np.random.default_rng(seed)
    return (elementwise_cases(rng) + structural_cases(rng) + normalisation_cases(rng) + conv_cases(rng)
            + codec_cases(rng))


def check_case(fn, inputs):
    return gradcheck(fn, [np.asarray(v, dtype=np.float64) for v in inputs], tolerance=TOLERANCE)


def soft_quantizer_error(seed) -> float:
    """Fused soft-quantizer backward against central differences of the soft assignment."""
    with precision(np.float64):
        return _soft_quantizer_error(seed)


def _soft_quantizer_error(seed) -> float:
    rng = np.random.default_rng(seed)
    levels = int(rng.integers(2, 9))
    centers = np.sort(rng.uniform(-3, 3, size=levels))
    while np.min(np.diff(centers)) < 0.2:
        centers = np.sort(rng.uniform(-3, 3, size=levels))
    sigma = float(rng.uniform(0.5, 3.0))
    shape = _shape(rng, 2)
    latent = rng.uniform(-3.5, 3.5, size=shape)
    # keep clear of the |y - c| kinks so the difference quotient is valid
    near = np.abs(latent[..., None] - centers).min(axis=-1) < 1e-3
    latent[near] += 2e-3
    upstream = rng.normal(size=shape)

    book = Codebook(centers, sigma=sigma)
    y = Tensor(latent.copy(), requires_grad=True, dtype=np.float64)
    soft_quantize(y, book).backward(upstream)
    analytic = np.concatenate([y.grad.reshape(-1), book.centers.grad.reshape(-1)])

    def relaxed(lat, cen):
        b = Codebook(cen, sigma=sigma)
        return float(np.sum(soft_relaxation(Tensor(lat, dtype=np.float64), b).data * upstream))

    eps = 1e-4
    numeric = []
    for arr_index, base in enumerate((latent, centers)):
        for i in range(base.size):
            plus, minus = base.copy().reshape(-1), base.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            args_p = [latent, centers]
            args_m = [latent, centers]
            args_p[arr_index] = plus.reshape(base.shape)
            args_m[arr_index] = minus.reshape(base.shape)
            numeric.append((relaxed(*args_p) - relaxed(*args_m)) / (2 * eps))
    return relative_error(analytic, np.asarray(numeric))

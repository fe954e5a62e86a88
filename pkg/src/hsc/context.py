"""Auto-regressive 3-D context models over quantized symbol grids.

A symbol grid of shape (C, H, W) is treated as a one-feature volume scanned
in raster order over (channel, row, column).  Every convolution is masked so
that the output at a site only sees strictly earlier sites; conditioning
features (decoded stage-two output) are global and enter every layer
unmasked.

Two inference routes exist:

* the float route (autodiff) used for training and rate estimates;
* a fixed-point route used by the arithmetic coder.  Weights and activations
  are rounded to multiples of 2**-14 and every dot product is carried out on
  integer-valued float64 arrays that stay below 2**53, so the result is exact
  and independent of summation order.  Whole-grid evaluation and site-by-site
  evaluation therefore agree bit for bit, which is what lets the decoder
  rebuild the encoder's frequency tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Module, Tensor, ops
from .autodiff.nn import MaskedConv3d
from .autodiff.tensor import ShapeError
from .quantizer import QuantizedLatent

PMF_FLOOR = 2.0 ** -16
FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS
FIXED_BITS = 14
ACT_LIMIT = float(256 << FIXED_BITS)
EXACT_LIMIT = 2.0 ** 52


def causal_mask(kernel: int = 3, include_center: bool = False) -> np.ndarray:
    """Boolean (k, k, k) mask of taps at raster offsets before (or at) the center."""
    r = kernel // 2
    off = np.arange(-r, r + 1)
    dc, dh, dw = np.meshgrid(off, off, off, indexing="ij")
    before = (dc < 0) | ((dc == 0) & ((dh < 0) | ((dh == 0) & (dw < 0))))
    if include_center:
        before |= (dc == 0) & (dh == 0) & (dw == 0)
    return before


def _layer_mask(causal_in: int, cond_in: int, first: bool, kernel: int, unmask_center: bool) -> np.ndarray:
    causal = causal_mask(kernel, include_center=not first or unmask_center)
    full = np.ones((kernel,) * 3, dtype=bool)
    return np.stack([causal] * causal_in + [full] * cond_in)


class ContextModel(Module):
    """Masked 3-D convolution stack predicting a PMF over ``levels`` symbols per site."""

    def __init__(self, levels: int, conditioning_channels: int = 0, hidden: int = 24, layers: int = 4,
                 kernel: int = 3, rng=None, unmask_center: bool = False):
        if layers < 1:
            raise ValueError("need at least one layer")
        rng = rng or np.random.default_rng(0)
        self.levels = levels
        self.conditioning_channels = conditioning_channels
        self.kernel = kernel
        self.layers = []
        cin = 1
        for i in range(layers):
            last = i == layers - 1
            cout = levels if last else hidden
            mask = _layer_mask(cin, conditioning_channels, i == 0, kernel, unmask_center)
            self.layers.append(MaskedConv3d(cin + conditioning_channels, cout, mask, rng=rng, zero_init=last))
            cin = hidden

    @property
    def depth(self) -> int:
        return len(self.layers)

    def _cond_volume(self, conditioning, grid_shape):
        if self.conditioning_channels == 0:
            if conditioning is not None:
                raise ValueError("this context model takes no conditioning")
            return None
        if conditioning is None:
            raise ValueError("conditioning is required for this context model")
        cond = conditioning if isinstance(conditioning, Tensor) else Tensor(conditioning)
        n, c, h, w = cond.shape
        if c != grid_shape[1] * self.conditioning_channels:
            raise ShapeError(f"conditioning has {c} channels, grid needs {grid_shape[1] * self.conditioning_channels}")
        if (h, w) != grid_shape[2:]:
            factor = grid_shape[2] // h
            if factor * h != grid_shape[2] or factor * w != grid_shape[3]:
                raise ShapeError(f"conditioning {cond.shape} cannot be upsampled to {grid_shape}")
            cond = ops.upsample_nearest(cond, factor)
        k = self.conditioning_channels
        return cond.reshape(n, k, grid_shape[1], grid_shape[2], grid_shape[3])

    def logits(self, values: Tensor, conditioning=None) -> Tensor:
        """(N, C, H, W) center values -> (N, levels, C, H, W) logits."""
        if values.ndim != 4:
            raise ShapeError("symbol values must be (N, C, H, W)")
        n, c, h, w = values.shape
        cond = self._cond_volume(conditioning, values.shape)
        x = values.reshape(n, 1, c, h, w)
        for i, layer in enumerate(self.layers):
            inp = x if cond is None else ops.concat([x, cond], axis=1)
            x = layer(inp)
            if i < self.depth - 1:
                x = ops.relu(x)
        return x

    def probabilities(self, values: Tensor, conditioning=None) -> Tensor:
        p = ops.softmax(self.logits(values, conditioning), axis=1)
        return p * (1.0 - self.levels * PMF_FLOOR) + PMF_FLOOR

    def frozen(self, centers) -> "FrozenContextModel":
        return FrozenContextModel(self, centers)


@dataclass
class PmfGrid:
    """Per-site PMFs; ``probs`` has the symbol axis at position 1 (N, L, C, H, W)."""

    probs: Tensor

    def vectors(self) -> np.ndarray:
        return np.moveaxis(self.probs.data, 1, -1)


def _values(symbols) -> Tensor:
    if isinstance(symbols, QuantizedLatent):
        vals = symbols.dequantized
        return Tensor(vals if vals.ndim == 4 else vals[None])
    if isinstance(symbols, Tensor):
        return symbols
    return Tensor(symbols)


def predict_pmfs(model: ContextModel, symbols, conditioning=None) -> PmfGrid:
    """All conditionals of a grid in one teacher-forced pass."""
    return PmfGrid(model.probabilities(_values(symbols), conditioning))


def rate_estimate(pmfs: PmfGrid, symbols, weights=None) -> Tensor:
    """sum_i w_i * -log2 P_i[symbol_i] in bits (differentiable w.r.t. the PMFs)."""
    idx = symbols.symbols if isinstance(symbols, QuantizedLatent) else np.asarray(symbols)
    if idx.ndim == pmfs.probs.ndim - 2:
        idx = idx[None]
    picked = ops.take_along_axis(pmfs.probs, idx[:, None], axis=1)
    bits = ops.log(picked) * (-1.0 / math.log(2.0))
    bits = bits.reshape(idx.shape)
    if weights is not None:
        w = weights.expanded if hasattr(weights, "expanded") else weights
        bits = bits * w
    return ops.sum_(bits)


def code_lengths(model: ContextModel, values: Tensor, symbols: np.ndarray, conditioning=None) -> Tensor:
    """Per-site code length in bits under the floored PMF, shaped like ``symbols``.

    The value is exact, but the gradient is that of the unfloored
    log-softmax: below the floor the floored loss goes flat, and a model that
    has ruled a symbol out would then never learn it back.
    """
    logits = model.logits(values, conditioning)
    shift = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    log_norm = ops.log(ops.sum_(ops.exp(shift), axis=1, keepdims=True))
    idx = np.asarray(symbols)[:, None]
    bits = ops.take_along_axis(shift - log_norm, idx, axis=1).reshape(symbols.shape) * (-1.0 / math.log(2.0))
    probs = np.exp(shift.data - log_norm.data) * (1.0 - model.levels * PMF_FLOOR) + PMF_FLOOR
    exact = -np.log2(np.take_along_axis(probs, idx, axis=1)[:, 0])
    return bits + Tensor((exact - bits.data).astype(bits.dtype))


def site_bits(pmfs: PmfGrid, symbols) -> np.ndarray:
    idx = np.asarray(symbols)
    if idx.ndim == pmfs.probs.ndim - 2:
        idx = idx[None]
    picked = np.take_along_axis(pmfs.probs.data, idx[:, None], axis=1)[:, 0]
    return -np.log2(picked)


# -- fixed-point route ---------------------------------------------------------------

def to_fixed(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64) * float(1 << FIXED_BITS)
    return np.clip(np.rint(arr), -ACT_LIMIT, ACT_LIMIT)


def _requantize(acc: np.ndarray) -> np.ndarray:
    act = np.floor(acc * (1.0 / (1 << FIXED_BITS)) + 0.5)
    return np.clip(act, 0.0, ACT_LIMIT)


class FrozenContextModel:
    """Integer-exact snapshot of a ContextModel for entropy coding."""

    def __init__(self, model: ContextModel, centers):
        self.levels = model.levels
        self.conditioning_channels = model.conditioning_channels
        self.kernel = model.kernel
        self.radius = model.kernel // 2
        self.center_fixed = to_fixed(np.asarray(centers, dtype=np.float32))
        if self.center_fixed.size != self.levels:
            raise ShapeError("codebook size does not match the context model")
        scale = float(1 << FIXED_BITS)
        self.weights, self.biases = [], []
        for layer in model.layers:
            w = np.rint(layer.weight.data.astype(np.float64) * layer.mask * scale)
            b = np.rint(layer.bias.data.astype(np.float64) * scale * scale)
            bound = np.abs(w).reshape(w.shape[0], -1).sum(axis=1) * ACT_LIMIT + np.abs(b)
            if bound.max(initial=0) >= EXACT_LIMIT:
                raise OverflowError("context model weights too large for exact fixed-point inference")
            self.weights.append(w)
            self.biases.append(b)

    def _conv(self, x: np.ndarray, i: int) -> np.ndarray:
        """Valid convolution of an (F, D, H, W) box; returns (Co, D-2r, H-2r, W-2r)."""
        k = self.kernel
        cols = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
        acc = np.tensordot(self.weights[i], cols, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
        return acc + self.biases[i].reshape(-1, 1, 1, 1)

    def _cond_fixed(self, conditioning, grid_shape):
        if self.conditioning_channels == 0:
            return None
        cond = np.asarray(conditioning, dtype=np.float32)
        c, h, w = grid_shape
        if cond.shape[-2:] != (h, w):
            f = h // cond.shape[-2]
            cond = cond.repeat(f, axis=-2).repeat(f, axis=-1)
        return to_fixed(cond.reshape(self.conditioning_channels, c, h, w))

    def _run(self, x: np.ndarray, cond: np.ndarray | None, inside: list | None) -> np.ndarray:
        r = self.radius
        depth = len(self.weights)
        for i in range(depth):
            if cond is not None:
                trim = (cond.shape[1] - x.shape[1]) // 2
                cc = cond[:, trim:cond.shape[1] - trim, trim:cond.shape[2] - trim, trim:cond.shape[3] - trim]
                x = np.concatenate([x, cc], axis=0)
            acc = self._conv(x, i)
            if i == depth - 1:
                return acc * (1.0 / float(1 << (2 * FIXED_BITS)))
            x = _requantize(acc)
            if inside is not None:
                x = x * inside[i]
            else:
                x = np.pad(x, ((0, 0),) + ((r, r),) * 3)
        raise AssertionError("unreachable")

    def grid_logits(self, symbols: np.ndarray, conditioning=None) -> np.ndarray:
        """Logits for every site of a (C, H, W) grid, shape (L, C, H, W)."""
        symbols = np.asarray(symbols)
        r = self.radius
        x = np.pad(self.center_fixed[symbols][None], ((0, 0),) + ((r, r),) * 3)
        cond = self._cond_fixed(conditioning, symbols.shape)
        if cond is not None:
            cond = np.pad(cond, ((0, 0),) + ((r, r),) * 3)
        return self._run(x, cond, None)

    def site_logits(self, symbols: np.ndarray, known: int, conditioning=None, site=None) -> np.ndarray:
        """Logits at raster position ``site`` using only the first ``known`` symbols."""
        symbols = np.asarray(symbols)
        c, h, w = symbols.shape
        site = known if site is None else site
        pc, rem = divmod(site, h * w)
        ph, pw = divmod(rem, w)
        depth = len(self.weights)
        reach = depth * self.radius
        values = self.center_fixed[symbols].reshape(-1).copy()
        values[known:] = 0.0
        values = values.reshape(c, h, w)

        def box(arr, extra):
            rr = reach + extra
            out = np.zeros(arr.shape[:-3] + (2 * rr + 1,) * 3)
            src, dst = [], []
            for p, n in ((pc, c), (ph, h), (pw, w)):
                lo, hi = max(p - rr, 0), min(p + rr + 1, n)
                src.append(slice(lo, hi))
                dst.append(slice(lo - (p - rr), hi - (p - rr)))
            out[(Ellipsis, *dst)] = arr[(Ellipsis, *src)]
            return out

        x = box(values, 0)[None]
        cond = self._cond_fixed(conditioning, symbols.shape)
        cond_box = None if cond is None else box(cond, 0)
        inside = []
        for i in range(1, depth):
            ones = np.ones((c, h, w))
            inside.append(box(ones, -i * self.radius)[None])
        return self._run(x, cond_box, inside)[:, 0, 0, 0]


def freqs_from_logits(logits) -> list[int]:
    """Quantize one site's PMF to integer frequencies summing to 2**16, each >= 1.

    The PMF is rebuilt from the logits with scalar libm calls and an exactly
    rounded sum, so any caller holding the same logits gets the same table.
    """
    row = [float(v) for v in logits]
    levels = len(row)
    top = max(row)
    exps = [math.exp(v - top) for v in row]
    total = math.fsum(exps)
    spare = FREQ_TOTAL - levels
    scaled = [((e / total) * (1.0 - levels * PMF_FLOOR) + PMF_FLOOR) * spare for e in exps]
    base = [int(math.floor(s)) for s in scaled]
    deficit = spare - sum(base)
    order = sorted(range(levels), key=lambda j: (-(scaled[j] - base[j]), j))
    for j in order[:deficit]:
        base[j] += 1
    return [b + 1 for b in base]


def grid_freqs(frozen: FrozenContextModel, symbols: np.ndarray, conditioning=None) -> list[list[int]]:
    logits = frozen.grid_logits(symbols, conditioning)
    flat = logits.reshape(frozen.levels, -1).T
    return [freqs_from_logits(row) for row in flat]


@dataclass
class AuditReport:
    trials: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations


def causality_audit(model: ContextModel, trials: int = 100, grid_shape=(3, 4, 4), seed: int = 0,
                    centers=None, fixed_point: bool = True) -> AuditReport:
    """Perturb random future sites and check that no earlier PMF moves.

    Each trial draws a grid and a raster position p, re-draws every symbol at
    positions >= p and compares PMFs at positions <= p bit for bit, on the
    float route and (optionally) the fixed-point route.
    """
    rng = np.random.default_rng(seed)
    centers = np.linspace(-2, 2, model.levels) if centers is None else np.asarray(centers)
    frozen = model.frozen(centers) if fixed_point else None
    n_sites = int(np.prod(grid_shape))
    violations = []
    for t in range(trials):
        sym = rng.integers(0, model.levels, size=grid_shape)
        cond = None
        if model.conditioning_channels:
            cond = rng.normal(size=(model.conditioning_channels * grid_shape[0],) + tuple(grid_shape[1:]))
        p = int(rng.integers(0, n_sites))
        other = sym.copy().reshape(-1)
        other[p:] = rng.integers(0, model.levels, size=n_sites - p)
        other = other.reshape(grid_shape)
        for name, fn in _routes(model, frozen, centers, cond):
            a, b = fn(sym), fn(other)
            moved = np.flatnonzero((a != b).any(axis=0))
            bad = moved[moved <= p]
            if bad.size:
                violations.append((t, name, p, int(bad[0])))
    return AuditReport(trials, violations)


def _routes(model, frozen, centers, cond):
    c32 = np.asarray(centers, dtype=np.float32)

    def float_route(sym):
        vals = Tensor(c32[sym][None].astype(model.layers[0].weight.dtype))
        cc = None if cond is None else Tensor(cond[None].astype(vals.dtype))
        from .autodiff import no_grad
        with no_grad():
            probs = model.probabilities(vals, cc).data[0]
        return probs.reshape(model.levels, -1)

    yield "float", float_route
    if frozen is not None:
        yield "fixed", lambda sym: frozen.grid_logits(sym, cond).reshape(model.levels, -1)

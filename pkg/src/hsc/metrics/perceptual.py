"""Deep perceptual loss over pluggable feature extractors and learned channel weights."""

from __future__ import annotations

import functools

import numpy as np

from ..autodiff import Module, Parameter, Tensor, no_grad, ops
from ..autodiff import checkpoint as ckpt
from ..autodiff.nn import Conv2d, ConvTranspose2d
from ..autodiff.optim import adam_step
from ..autodiff.tensor import ShapeError


def _nchw(images) -> Tensor:
    """H x W x 3 array, N x H x W x 3 array, or NCHW Tensor -> NCHW Tensor."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class FeatureExtractor(Module):
    """Five conv blocks, each ending in a ReLU whose output is a tap.

    Blocks after the first halve the resolution.  ``pretrain`` fits a small
    transposed-conv decoder on top so the taps carry image structure rather
    than purely random projections.
    """

    def __init__(self, channels=(8, 16, 24, 32, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.blocks = []
        cin = 3
        for i, cout in enumerate(channels):
            self.blocks.append(Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, rng=rng))
            cin = cout
        self.channels = tuple(channels)

    @property
    def taps(self) -> list[tuple[int, int]]:
        return list(enumerate(self.channels))

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for block in self.blocks:
            x = ops.relu(block(x))
            feats.append(x)
        return feats

    def pretrain(self, images: np.ndarray, steps: int = 150, batch: int = 8, lr: float = 2e-3,
                 seed: int = 0) -> list[float]:
        """Autoencoder warm-up on N x H x W x 3 images; returns the loss trace."""
        rng = np.random.default_rng(seed)
        widths = self.channels[::-1]
        ups = [ConvTranspose2d(widths[i], widths[i + 1], rng=rng) for i in range(len(widths) - 1)]
        head = Conv2d(widths[-1], 3, 3, rng=rng)
        params = self.parameters() + [p for u in ups for p in u.parameters()] + head.parameters()
        trace = []
        for _ in range(steps):
            idx = rng.choice(len(images), size=min(batch, len(images)), replace=False)
            x = _nchw(images[idx])
            h = self(x)[-1]
            for up in ups:
                h = ops.relu(up(h))
            loss = ops.mse(head(h) + 0.5, x)
            loss.backward()
            adam_step(params, lr)
            trace.append(float(loss.data))
        return trace


class IdentityExtractor(Module):
    """A single tap holding the raw image channels (useful for controlled experiments)."""

    def __init__(self, channels: int = 3):
        self.channels = (channels,)

    @property
    def taps(self):
        return [(0, self.channels[0])]

    def forward(self, x: Tensor) -> list[Tensor]:
        return [x]


VGG16_LAYOUT = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


class VGG16Extractor(Module):
    """VGG-16 convolution stack with taps after the last ReLU of each block.

    Ships without weights; load user-supplied ones with ``load_weights``
    (HSC1 format, names ``blocks.<i>.weight`` / ``blocks.<i>.bias``).
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.blocks = []
        self.ends = []
        cin = 3
        for group in VGG16_LAYOUT:
            for cout in group:
                self.blocks.append(Conv2d(cin, cout, 3, rng=rng))
                cin = cout
            self.ends.append(len(self.blocks) - 1)
        self.channels = tuple(g[-1] for g in VGG16_LAYOUT)

    @property
    def taps(self):
        return list(enumerate(self.channels))

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.blocks):
            x = ops.relu(conv(x))
            if i in self.ends:
                feats.append(x)
                if len(feats) < len(self.ends):
                    x = ops.max_pool2d(x, 2)
        return feats

    def load_weights(self, path) -> None:
        self.load_state_dict(ckpt.load(path))


class ChannelWeights(Module):
    """Non-negative per-channel weights, one vector per tap."""

    def __init__(self, channels, init: float = 1.0):
        self.vectors = [Parameter(np.full(c, init)) for c in channels]

    @classmethod
    def ones(cls, extractor) -> "ChannelWeights":
        return cls([c for _, c in extractor.taps])

    def clamp_(self) -> None:
        for v in self.vectors:
            np.maximum(v.data, 0.0, out=v.data)

    def arrays(self) -> list[np.ndarray]:
        return [v.data.copy() for v in self.vectors]

    def save(self, path) -> None:
        ckpt.save(path, {f"tap{i}": v.data for i, v in enumerate(self.vectors)})

    @classmethod
    def load(cls, path) -> "ChannelWeights":
        named = ckpt.load(path)
        vecs = [named[k] for k in sorted(named, key=lambda k: int(k[3:]))]
        out = cls([v.size for v in vecs])
        for p, v in zip(out.vectors, vecs):
            p.assign(v)
        return out


def _weight_list(weights, taps):
    if weights is None:
        return [np.ones(c) for _, c in taps]
    vecs = weights.vectors if isinstance(weights, ChannelWeights) else list(weights)
    if len(vecs) != len(taps):
        raise ShapeError(f"{len(vecs)} weight vectors for {len(taps)} taps")
    for v, (_, c) in zip(vecs, taps):
        if np.asarray(v.data if isinstance(v, Tensor) else v).size != c:
            raise ShapeError("weight vector length does not match its tap")
    return vecs


def dpl_from_features(feats_x, feats_xhat, weights, eps: float = 1e-10) -> Tensor:
    """Per-image sum over taps of spatial means of ||w * (z_xhat - z_x)||^2, shape (N,)."""
    total = None
    for fx, fy, w in zip(feats_x, feats_xhat, weights):
        zx = ops.channel_norm(fx if isinstance(fx, Tensor) else Tensor(fx), axis=1, eps=eps)
        zy = ops.channel_norm(fy if isinstance(fy, Tensor) else Tensor(fy), axis=1, eps=eps)
        w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=zx.dtype))
        diff = (zy - zx) * w.reshape(1, -1, 1, 1)
        term = ops.mean(ops.sum_(diff * diff, axis=1), axis=(1, 2))
        total = term if total is None else total + term
    return total


def dpl(x, xhat, extractor, weights=None, eps: float = 1e-10, reduce: bool = True) -> Tensor:
    """Deep perceptual loss between image batches (mean over the batch when ``reduce``)."""
    x, xhat = _nchw(x), _nchw(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"images differ in shape: {x.shape} vs {xhat.shape}")
    ws = _weight_list(weights, extractor.taps)
    per_image = dpl_from_features(extractor(x), extractor(xhat), ws, eps)
    return ops.mean(per_image) if reduce else per_image


def dpl_value(x, xhat, extractor, weights=None) -> float:
    with no_grad():
        return float(dpl(x, xhat, extractor, weights).data)


def tap_distances(x, xhat, extractor, eps: float = 1e-10) -> list[np.ndarray]:
    """Per-channel spatial means of squared normalized differences; dpl = sum_l w_l^2 . d_l."""
    with no_grad():
        fx, fy = extractor(_nchw(x)), extractor(_nchw(xhat))
        out = []
        for a, b in zip(fx, fy):
            za = ops.channel_norm(a, axis=1, eps=eps).data
            zb = ops.channel_norm(b, axis=1, eps=eps).data
            out.append(((zb - za) ** 2).mean(axis=(2, 3)).astype(np.float64))
    return out


@functools.lru_cache(maxsize=4)
def default_extractor(seed: int = 0, steps: int = 150) -> FeatureExtractor:
    """The lab extractor, warmed up on a fixed synthetic corpus (cached per process)."""
    from ..corpus import synthetic_corpus

    images = np.stack([s.image for s in synthetic_corpus(64, seed=10_000 + seed)]).astype(np.float32)
    ext = FeatureExtractor(seed=seed)
    ext.pretrain(images, steps=steps, seed=seed)
    return ext

"""Two-stage saliency-masked image codec: networks, training forward pass and bitstreams."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from . import arith
from .autodiff import Module, Tensor, no_grad, ops
from .autodiff.tensor import grad_enabled
from .autodiff import checkpoint as ckpt
from .autodiff.nn import Conv2d, ConvTranspose2d, ResidualBlock, SelfAttention
from .autodiff.tensor import ShapeError
from .config import canonical_text, digest
from .context import ContextModel, code_lengths, freqs_from_logits
from .masking import (
    SaliencyMask, apply_mask, fuse_and_expand, heuristic_saliency, importance_channel, upsample_grid,
)
from .quantizer import Codebook, QuantizedLatent, quantize_forward, soft_quantize

MAGIC = b"HSCB"
VERSION = 1
PAD_MULTIPLE = 32
LATENT_FACTOR = 8
HYPER_FACTOR = 4
# outermost initial codebook center
LATENT_LIMIT = 2.0
# raw importance bias at init: sigmoid(3) keeps ~95% of the channels
IMPORTANCE_INIT = 3.0


class FormatError(ValueError):
    """Malformed bitstream or checkpoint."""


class DigestMismatch(FormatError):
    """Bitstream and checkpoint were produced under different configs."""


@dataclass
class CodecConfig:
    C1: int = 32
    C2: int = 32
    L1: int = 6
    L2: int = 6
    lambda1: float = 1.0
    lambda2: float = 1.0
    w1: float = 0.75
    w2: float = 0.25
    alpha: float = 1.0
    beta: float = 350.0
    target_bpp: float = 0.4
    seed: int = 0
    filters: int = 32
    hyper_filters: int = 32
    res_blocks1: int = 3
    res_blocks2: int = 2
    attention1: str = "3"
    attention2: str = "2"
    context_hidden: int = 24
    context_layers: int = 4
    sigma: float = 1.0

    def __post_init__(self):
        if self.C1 < 1 or self.C2 < 1:
            raise ValueError("bottleneck channel counts must be >= 1")
        if min(self.lambda1, self.lambda2, self.w1, self.w2, self.alpha, self.beta) < 0:
            raise ValueError("weights must be non-negative")
        if abs(self.w1 + self.w2 - 1.0) > 1e-9:
            raise ValueError("w1 + w2 must equal 1")
        if self.target_bpp <= 0:
            raise ValueError("target_bpp must be positive")

    def canonical(self) -> str:
        return canonical_text(self)

    @property
    def digest(self) -> int:
        return digest(self.canonical())


def bounded(latent: Tensor, limit: float = LATENT_LIMIT) -> Tensor:
    """limit * tanh(latent / limit).

    Latents far outside the codebook span get no gradient from the soft
    quantizer and would stay dead, so they are squashed into it.
    """
    return (ops.sigmoid(latent * (2.0 / limit)) * 2.0 - 1.0) * limit


def importance_head(raw: Tensor) -> Tensor:
    """Map the last bottleneck channel to C * sigmoid(raw).

    The result already lies in [0, C], so the importance clamp downstream never
    saturates and the map cannot get stuck where its gradient vanishes.
    """
    c = raw.shape[1] - 1
    return ops.concat([raw[:, :c], (ops.sigmoid(raw[:, c:]) * float(c))], axis=1)


def _positions(spec: str) -> set[int]:
    return {int(tok) for tok in spec.replace(" ", "").split(",") if tok}


def _trunk(channels, blocks, attention_after, rng):
    """Residual blocks with self-attention inserted after the listed block numbers (1-based)."""
    layers = []
    for i in range(1, blocks + 1):
        layers.append(ResidualBlock(channels, rng=rng))
        if i in attention_after:
            layers.append(SelfAttention(channels, rng=rng))
    if 0 in attention_after:
        layers.insert(0, SelfAttention(channels, rng=rng))
    return layers


def _run(layers, x):
    for layer in layers:
        x = layer(x)
    return x


class ImageEncoder(Module):
    """Image -> (C1 + 1) channels at 1/8 resolution; the last channel is the importance map."""

    def __init__(self, cfg: CodecConfig, rng):
        f = cfg.filters
        self.down = [Conv2d(3, f // 2, 4, 2, 1, rng=rng), Conv2d(f // 2, f, 4, 2, 1, rng=rng),
                     Conv2d(f, f, 4, 2, 1, rng=rng)]
        self.trunk = _trunk(f, cfg.res_blocks1, _positions(cfg.attention1), rng)
        self.head = Conv2d(f, cfg.C1 + 1, 3, rng=rng)
        # start with nearly every channel kept; the rate term carves the mask down
        self.head.bias.data[-1] = IMPORTANCE_INIT

    def forward(self, x):
        for i, conv in enumerate(self.down):
            x = conv(x)
            if i < len(self.down) - 1:
                x = ops.relu(x)
        return importance_head(self.head(_run(self.trunk, x)))


class ImageDecoder(Module):
    def __init__(self, cfg: CodecConfig, rng):
        f = cfg.filters
        self.stem = Conv2d(cfg.C1, f, 3, rng=rng)
        self.trunk = _trunk(f, cfg.res_blocks1, _positions(cfg.attention1), rng)
        self.up = [ConvTranspose2d(f, f, rng=rng), ConvTranspose2d(f, f // 2, rng=rng),
                   ConvTranspose2d(f // 2, 3, rng=rng)]
        # start near a flat mid-grey image
        self.up[-1].weight.data *= 0.1

    def forward(self, y):
        x = _run(self.trunk, self.stem(y))
        for i, conv in enumerate(self.up):
            x = conv(x)
            if i < len(self.up) - 1:
                x = ops.relu(x)
        return x + 0.5


class HyperEncoder(Module):
    """Quantized latent -> (C2 + 1) channels at a further 1/4 resolution."""

    def __init__(self, cfg: CodecConfig, rng):
        f = cfg.hyper_filters
        self.down = [Conv2d(cfg.C1, f, 4, 2, 1, rng=rng), Conv2d(f, f, 4, 2, 1, rng=rng)]
        self.trunk = _trunk(f, cfg.res_blocks2, _positions(cfg.attention2), rng)
        self.head = Conv2d(f, cfg.C2 + 1, 3, rng=rng)

    def forward(self, y):
        x = ops.relu(self.down[0](y))
        x = self.down[1](x)
        return importance_head(self.head(_run(self.trunk, x)))


class HyperDecoder(Module):
    """Quantized hyper-latent -> C1 conditioning features at the latent resolution."""

    def __init__(self, cfg: CodecConfig, rng):
        f = cfg.hyper_filters
        self.stem = Conv2d(cfg.C2, f, 3, rng=rng)
        self.trunk = _trunk(f, cfg.res_blocks2, _positions(cfg.attention2), rng)
        self.up = [ConvTranspose2d(f, f, rng=rng), ConvTranspose2d(f, cfg.C1, rng=rng)]

    def forward(self, z):
        x = _run(self.trunk, self.stem(z))
        x = ops.relu(self.up[0](x))
        return self.up[1](x)


@dataclass
class ForwardResult:
    xhat: Tensor
    y_tilde: Tensor
    z_tilde: Tensor
    conditioning: Tensor
    symbols1: np.ndarray
    symbols2: np.ndarray
    mask1: object
    mask2: object
    bits1: Tensor
    bits2: Tensor
    # same values as bits1/bits2, but with the symbol values fed in as constants
    fit_bits1: Tensor
    fit_bits2: Tensor

    def weighted_bits(self) -> Tensor:
        """Per-image soft-mask-weighted code length estimate, shape (N,)."""
        b1 = ops.sum_(self.bits1 * self.mask1.expanded, axis=(1, 2, 3))
        b2 = ops.sum_(self.bits2 * self.mask2.expanded, axis=(1, 2, 3))
        return b1 + b2

    def plain_bits(self) -> Tensor:
        """Per-image unweighted code length whose gradient reaches only the entropy models."""
        return ops.sum_(self.fit_bits1, axis=(1, 2, 3)) + ops.sum_(self.fit_bits2, axis=(1, 2, 3))




class HierarchicalCodec(Module):
    def __init__(self, cfg: CodecConfig):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        self.encoder = ImageEncoder(cfg, rng)
        self.decoder = ImageDecoder(cfg, rng)
        self.hyper_encoder = HyperEncoder(cfg, rng)
        self.hyper_decoder = HyperDecoder(cfg, rng)
        self.codebook1 = Codebook.uniform(cfg.L1, sigma=cfg.sigma, codebook_id=1)
        self.codebook2 = Codebook.uniform(cfg.L2, sigma=cfg.sigma, codebook_id=2)
        self.context1 = ContextModel(cfg.L1, 1, cfg.context_hidden, cfg.context_layers, rng=rng)
        self.context2 = ContextModel(cfg.L2, 0, cfg.context_hidden, cfg.context_layers, rng=rng)

    # -- analysis ----------------------------------------------------------------------

    def stage_one(self, x: Tensor, saliency):
        y, importance = importance_channel(self.encoder(x))
        y = bounded(y)
        mask = fuse_and_expand(importance, saliency, self.config.lambda1, self.config.lambda2, self.config.C1)
        return apply_mask(y, mask), mask

    def stage_two(self, y_tilde: Tensor):
        z, importance = importance_channel(self.hyper_encoder(y_tilde))
        z = bounded(z)
        mask = fuse_and_expand(importance, None, self.config.lambda1, self.config.lambda2, self.config.C2)
        return apply_mask(z, mask), mask

    def forward(self, x: Tensor, saliency) -> ForwardResult:
        """Training pass: x is (N, 3, H, W) in [0, 1], saliency an (N, H/8, W/8) 0/1 array."""
        y_m, mask1 = self.stage_one(x, saliency)
        y_tilde = soft_quantize(y_m, self.codebook1)
        # the hyper path reads a fixed copy of the latent so its auxiliary loss cannot
        # pull the encoder
        z_m, mask2 = self.stage_two(Tensor(y_tilde.data))
        z_tilde = soft_quantize(z_m, self.codebook2)
        cond = self.hyper_decoder(z_tilde)
        s1 = quantize_forward(y_m, self.codebook1).symbols
        s2 = quantize_forward(z_m, self.codebook2).symbols
        bits1 = code_lengths(self.context1, y_tilde, s1, cond)
        bits2 = code_lengths(self.context2, z_tilde, s2)
        if grad_enabled():
            # a second pass with constant symbol values, for fitting the entropy models
            # without pulling the latents toward predictability
            fit1 = code_lengths(self.context1, Tensor(y_tilde.data), s1, cond)
            fit2 = code_lengths(self.context2, Tensor(z_tilde.data), s2)
        else:
            fit1, fit2 = bits1, bits2
        xhat = self.decoder(y_tilde)
        return ForwardResult(xhat, y_tilde, z_tilde, cond, s1, s2, mask1, mask2, bits1, bits2, fit1, fit2)

    # -- checkpoints -------------------------------------------------------------------

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        named = {name: p.data for name, p in self.named_parameters()}
        named["__config__"] = ckpt.encode_text(self.config.canonical())
        named["__digest__"] = ckpt.encode_text(f"{self.config.digest:016x}")
        return named

    def save(self, path) -> None:
        ckpt.save(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, named: dict[str, np.ndarray]) -> "HierarchicalCodec":
        from .config import build, parse_text

        if "__config__" not in named:
            raise FormatError("checkpoint carries no codec config")
        text = ckpt.decode_text(named["__config__"])
        cfg = build(CodecConfig, parse_config_repr(parse_text(text)))
        stored = ckpt.decode_text(named.get("__digest__", np.zeros(0)))
        if stored and int(stored, 16) != cfg.digest:
            raise DigestMismatch("checkpoint digest does not match its config")
        model = cls(cfg)
        params = {k: v for k, v in named.items() if not k.startswith("__")}
        try:
            model.load_state_dict(params)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"checkpoint does not fit the config: {exc}") from None
        return model

    @classmethod
    def load(cls, path) -> "HierarchicalCodec":
        try:
            return cls.from_checkpoint(ckpt.load(path))
        except ckpt.CheckpointFormatError as exc:
            raise FormatError(str(exc)) from None


def parse_config_repr(values: dict[str, str]) -> dict[str, str]:
    """Undo the repr() quoting canonical_text applies to strings."""
    out = {}
    for k, v in values.items():
        if len(v) >= 2 and v[0] == v[-1] and v[0] in "'\"":
            v = v[1:-1]
        out[k] = v
    return out


# -- distortion ---------------------------------------------------------------------------

def _masked_images(x: Tensor, xhat: Tensor, saliency):
    s = saliency.grid if isinstance(saliency, SaliencyMask) else np.asarray(saliency)
    if s.ndim == 2:
        s = s[None]
    factor = x.shape[-1] // s.shape[-1]
    pix = upsample_grid(s, factor).astype(x.dtype)
    if pix.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"saliency {s.shape} does not cover image {x.shape}")
    pix = pix[:, None]
    return pix, 1.0 - pix


def weighted_distortion(x: Tensor, xhat: Tensor, saliency, w1: float = 0.75, w2: float = 0.25,
                        base_metric="mse") -> Tensor:
    """w1 * D(x*s, xhat*s) + w2 * D(x*(1-s), xhat*(1-s)) on (N, 3, H, W) images."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    xhat = xhat if isinstance(xhat, Tensor) else Tensor(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"images differ in shape: {x.shape} vs {xhat.shape}")
    metric = ops.mse if base_metric == "mse" else base_metric
    sal, rest = _masked_images(x, xhat, saliency)
    return metric(x * sal, xhat * sal) * w1 + metric(x * rest, xhat * rest) * w2


# -- bitstream ----------------------------------------------------------------------------

@dataclass
class Bitstream:
    width: int
    height: int
    digest: int
    codebooks: list
    stage2: arith.CodedPayload
    stage1: arith.CodedPayload
    version: int = VERSION

    @property
    def payload_bits(self) -> int:
        return self.stage1.declared_bits + self.stage2.declared_bits

    @property
    def bpp(self) -> float:
        return self.payload_bits / (self.width * self.height)

    @property
    def stage2_fraction(self) -> float:
        total = self.payload_bits
        return self.stage2.declared_bits / total if total else 0.0

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HIIQB", self.version, self.width, self.height, self.digest,
                                    len(self.codebooks))]
        for centers in self.codebooks:
            c = np.asarray(centers, dtype="<f4")
            parts.append(struct.pack("<H", c.size) + c.tobytes())
        parts.append(self.stage2.to_bytes())
        parts.append(self.stage1.to_bytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Bitstream":
        if buf[:4] != MAGIC:
            raise FormatError("not an HSCB bitstream")
        head = struct.calcsize("<HIIQB")
        if len(buf) < 4 + head:
            raise FormatError("truncated bitstream header")
        version, width, height, dig, nbooks = struct.unpack_from("<HIIQB", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        pos = 4 + head
        books = []
        try:
            for _ in range(nbooks):
                (levels,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                if pos + 4 * levels > len(buf):
                    raise FormatError("truncated codebook")
                books.append(np.frombuffer(buf, dtype="<f4", count=levels, offset=pos).astype(np.float32))
                pos += 4 * levels
            stage2, pos = arith.CodedPayload.read_from(buf, pos)
            stage1, pos = arith.CodedPayload.read_from(buf, pos)
        except struct.error:
            raise FormatError("truncated bitstream") from None
        except arith.CorruptPayload as exc:
            raise FormatError(str(exc)) from None
        if pos != len(buf):
            raise FormatError("trailing bytes after bitstream")
        return cls(width, height, dig, books, stage2, stage1, version)


def pad_image(image: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Reflect-pad an H x W x 3 image on the bottom/right to a multiple of ``multiple``."""
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return image
    mode = "reflect" if h > ph and w > pw else "symmetric"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)


def _as_batch(image: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)[None]).astype(np.float32))


def _resolve_saliency(image: np.ndarray, padded: np.ndarray, saliency) -> np.ndarray:
    grid_shape = (padded.shape[0] // LATENT_FACTOR, padded.shape[1] // LATENT_FACTOR)
    if saliency is None:
        saliency = heuristic_saliency(image)
    if not isinstance(saliency, SaliencyMask):
        saliency = SaliencyMask(np.asarray(saliency))
    return saliency.padded_to(grid_shape).grid[None]


@dataclass
class Analysis:
    """Everything compress() derives before entropy coding (kept for audits and diagnostics)."""

    q1: QuantizedLatent
    q2: QuantizedLatent
    conditioning: np.ndarray
    kept1: int
    mask1: np.ndarray


def analyse(model: HierarchicalCodec, image: np.ndarray, saliency=None) -> Analysis:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError("expected an H x W x 3 image")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    padded = pad_image(image)
    sal = _resolve_saliency(image, padded, saliency)
    with no_grad():
        y_m, mask1 = model.stage_one(_as_batch(padded), sal)
        q1 = quantize_forward(y_m, model.codebook1)
        y_vals = Tensor(_centers32(model.codebook1)[q1.symbols])
        z_m, _ = model.stage_two(y_vals)
        q2 = quantize_forward(z_m, model.codebook2)
        cond = hyper_features(model, q2.symbols[0])
    kept = int(np.ceil(mask1.expanded.data).sum())
    return Analysis(q1, q2, cond, kept, mask1.expanded.data[0])


def _centers32(codebook: Codebook) -> np.ndarray:
    return codebook.values().astype(np.float32)


def hyper_features(model: HierarchicalCodec, symbols2: np.ndarray, centers=None) -> np.ndarray:
    """Decoder-side conditioning D2(z~) for one image, shape (C1, h, w)."""
    centers = _centers32(model.codebook2) if centers is None else np.asarray(centers, dtype=np.float32)
    with no_grad():
        return model.hyper_decoder(Tensor(centers[symbols2][None])).data[0]


def compress(image: np.ndarray, model: HierarchicalCodec, saliency=None, hook=None) -> Bitstream:
    """Code an H x W x 3 image in [0, 1]; ``hook(stage, QuantizedLatent)`` sees the coded symbols."""
    h, w = image.shape[:2]
    a = analyse(model, image, saliency)
    s2, s1 = a.q2.symbols[0], a.q1.symbols[0]
    if hook is not None:
        hook("stage2", a.q2)
        hook("stage1", a.q1)
    stage2 = arith.encode(s2, model.context2, None, model.codebook2)
    stage1 = arith.encode(s1, model.context1, a.conditioning, model.codebook1)
    books = [_centers32(model.codebook1), _centers32(model.codebook2)]
    return Bitstream(w, h, model.config.digest, books, stage2, stage1)


def decompress(stream: Bitstream, model: HierarchicalCodec, hook=None) -> np.ndarray:
    """Rebuild the H x W x 3 image in [0, 1] using only the bitstream and the model."""
    if stream.digest != model.config.digest:
        raise DigestMismatch(f"digest mismatch: bitstream {stream.digest:016x} does not match checkpoint "
                             f"{model.config.digest:016x}")
    if len(stream.codebooks) != 2:
        raise FormatError("expected two codebooks")
    for book, own in zip(stream.codebooks, (model.codebook1, model.codebook2)):
        if not np.array_equal(book, _centers32(own)):
            raise DigestMismatch("bitstream codebook differs from the checkpoint")
    cfg = model.config
    hp, wp = -(-stream.height // PAD_MULTIPLE) * PAD_MULTIPLE, -(-stream.width // PAD_MULTIPLE) * PAD_MULTIPLE
    h1, w1 = hp // LATENT_FACTOR, wp // LATENT_FACTOR
    h2, w2 = h1 // HYPER_FACTOR, w1 // HYPER_FACTOR
    q2 = arith.decode(stream.stage2, model.context2, (cfg.C2, h2, w2), None, model.codebook2)
    cond = hyper_features(model, q2.symbols)
    q1 = arith.decode(stream.stage1, model.context1, (cfg.C1, h1, w1), cond, model.codebook1)
    if hook is not None:
        hook("stage2", q2)
        hook("stage1", q1)
    with no_grad():
        out = model.decoder(Tensor(_centers32(model.codebook1)[q1.symbols][None])).data[0]
    out = np.clip(out.transpose(1, 2, 0), 0.0, 1.0)
    return out[:stream.height, :stream.width].astype(np.float64)


def stage1_site_bits(model: HierarchicalCodec, image: np.ndarray, saliency=None) -> np.ndarray:
    """Code length in bits of every stage-1 site under the quantized coding tables, (C1, h, w)."""
    a = analyse(model, image, saliency)
    sym = a.q1.symbols[0]
    frozen = model.context1.frozen(model.codebook1.values())
    logits = frozen.grid_logits(sym, a.conditioning).reshape(model.context1.levels, -1).T
    bits = [16 - np.log2(freqs_from_logits(row)[s]) for row, s in zip(logits, sym.reshape(-1).tolist())]
    return np.asarray(bits).reshape(sym.shape)


def estimated_bits(model: HierarchicalCodec, image: np.ndarray, saliency=None, weighted=False) -> float:
    """Float cross-entropy estimate (bits) of both stages for one image."""
    padded = pad_image(np.asarray(image, dtype=np.float64))
    sal = _resolve_saliency(image, padded, saliency)
    with no_grad():
        res = model.forward(_as_batch(padded), sal)
        total = res.weighted_bits() if weighted else res.plain_bits()
    return float(total.data[0])


def replace(cfg: CodecConfig, **changes) -> CodecConfig:
    return dataclasses.replace(cfg, **changes)

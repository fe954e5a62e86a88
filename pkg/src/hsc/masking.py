"""Importance/saliency mask fusion, channel expansion and bottleneck masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError

PROVENANCES = ("ingested", "heuristic", "all_ones", "all_zeros", "ground_truth")


@dataclass
class SaliencyMask:
    grid: np.ndarray
    provenance: str = "ingested"

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ShapeError("saliency grid must be 2-D")
        if not np.isin(grid, (0, 1)).all():
            raise ValueError("saliency values must be 0 or 1")
        self.grid = grid.astype(np.uint8)

    @property
    def shape(self) -> tuple:
        return self.grid.shape

    @classmethod
    def ones(cls, shape) -> "SaliencyMask":
        return cls(np.ones(shape, dtype=np.uint8), "all_ones")

    @classmethod
    def zeros(cls, shape) -> "SaliencyMask":
        return cls(np.zeros(shape, dtype=np.uint8), "all_zeros")

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, factor: int = 8, provenance: str = "ingested") -> "SaliencyMask":
        """Binarize an image-resolution map (>= half range is salient) and max-pool by ``factor``."""
        pixels = np.asarray(pixels)
        scale = 255 if pixels.dtype == np.uint8 or pixels.max(initial=0) > 1 else 1
        binary = (pixels.astype(np.float64) >= scale / 2).astype(np.uint8)
        return cls(max_pool(binary, factor), provenance)

    def padded_to(self, shape) -> "SaliencyMask":
        h, w = self.grid.shape
        if (h, w) == tuple(shape):
            return self
        if h > shape[0] or w > shape[1]:
            raise ShapeError(f"saliency grid {self.grid.shape} exceeds latent grid {shape}")
        grid = np.zeros(shape, dtype=np.uint8)
        grid[:h, :w] = self.grid
        return SaliencyMask(grid, self.provenance)


@dataclass
class FusedMask:
    plane: Tensor
    expanded: Tensor
    lambda1: float
    lambda2: float

    @property
    def channels(self) -> int:
        return self.expanded.shape[-3]


def max_pool(binary: np.ndarray, factor: int) -> np.ndarray:
    h, w = binary.shape
    hp, wp = -(-h // factor) * factor, -(-w // factor) * factor
    padded = np.zeros((hp, wp), dtype=binary.dtype)
    padded[:h, :w] = binary
    return padded.reshape(hp // factor, factor, wp // factor, factor).max(axis=(1, 3))


def importance_channel(latent: Tensor):
    """Split an (N, C+1, H, W) bottleneck into the data latent and a [0, C] importance map."""
    if latent.ndim != 4 or latent.shape[1] < 2:
        raise ShapeError("importance_channel needs an (N, C+1, H, W) latent with C >= 1")
    c = latent.shape[1] - 1
    data = latent[:, :c]
    importance = ops.clamp(latent[:, c], 0.0, float(c))
    return data, importance


def expand(plane: Tensor, channels: int) -> Tensor:
    """m[k] = clamp(plane - k, 0, 1) for k = 0..channels-1 (channel axis inserted at -3)."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    offsets = np.arange(channels, dtype=plane.dtype).reshape(channels, 1, 1)
    stacked = ops.sub(plane.reshape(*plane.shape[:-2], 1, *plane.shape[-2:]), offsets)
    return ops.clamp(stacked, 0.0, 1.0)


def fuse_and_expand(importance: Tensor, saliency, lambda1: float, lambda2: float, channels: int) -> FusedMask:
    """plane = lambda1 * s * channels + lambda2 * importance, expanded over ``channels``.

    ``saliency`` may be None (stage two), a SaliencyMask, or an array/Tensor
    broadcastable to the importance map.
    """
    if not isinstance(importance, Tensor):
        importance = Tensor(importance)
    plane = importance * lambda2
    if saliency is not None:
        s = saliency.grid if isinstance(saliency, SaliencyMask) else saliency
        s = s.data if isinstance(s, Tensor) else np.asarray(s)
        if s.shape[-2:] != importance.shape[-2:]:
            raise ShapeError(f"saliency {s.shape} does not match importance map {importance.shape}")
        plane = plane + s.astype(importance.dtype) * (lambda1 * channels)
    return FusedMask(plane, expand(plane, channels), lambda1, lambda2)


def apply_mask(latent: Tensor, mask: FusedMask) -> Tensor:
    """latent * ceil(expanded); the ceiling passes gradients straight through to the mask."""
    if latent.shape[-3:] != mask.expanded.shape[-3:]:
        raise ShapeError(f"latent {latent.shape} and mask {mask.expanded.shape} differ")
    return latent * ops.ceil_ste(mask.expanded)


def kept_count(mask: FusedMask) -> int:
    return int(np.ceil(mask.expanded.data).sum())


def heuristic_saliency(image: np.ndarray, threshold: float = 0.5, factor: int = 8) -> SaliencyMask:
    """Center-weighted center-surround contrast, thresholded and max-pooled to the latent grid.

    ``image`` is H x W x 3 in [0, 1].  A constant image has no contrast to
    rank, so the whole frame is marked salient.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError("heuristic_saliency expects an H x W x 3 image")
    h, w = image.shape[:2]
    grid_shape = (-(-h // factor), -(-w // factor))
    gray = image @ np.array([0.299, 0.587, 0.114])
    if threshold <= 0 or np.ptp(gray) < 1e-12:
        return SaliencyMask(np.ones(grid_shape, dtype=np.uint8), "heuristic")
    center = ndimage.gaussian_filter(gray, sigma=1.0, mode="reflect")
    surround = ndimage.gaussian_filter(gray, sigma=max(h, w) / 4.0, mode="reflect")
    contrast = np.abs(center - surround)
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - (h - 1) / 2) / h) ** 2 + ((xx - (w - 1) / 2) / w) ** 2
    score = contrast * (1.0 - r2)
    peak = score.max()
    if peak <= 1e-12:
        return SaliencyMask(np.ones(grid_shape, dtype=np.uint8), "heuristic")
    binary = (score / peak >= threshold).astype(np.uint8)
    return SaliencyMask(max_pool(binary, factor), "heuristic")


def upsample_grid(grid: np.ndarray, factor: int = 8) -> np.ndarray:
    return np.asarray(grid).repeat(factor, axis=-2).repeat(factor, axis=-1)

"""Seeded synthetic image corpora with exact saliency ground truth.

Every corpus image is a background texture (smooth gradient, checkerboard,
Gaussian blobs or band-limited noise) with one or two flat or textured
shapes pasted on top; the shapes are the salient region.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .masking import SaliencyMask, max_pool

BACKGROUNDS = ("gradient", "checker", "blobs", "noise")


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    saliency: np.ndarray  # pixel-resolution 0/1 map
    name: str = ""

    def saliency_grid(self, factor: int = 8) -> np.ndarray:
        return max_pool(self.saliency.astype(np.uint8), factor)


def _colour(rng):
    return rng.uniform(0.05, 0.95, size=3)


def _gradient(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    a, b = _colour(rng), _colour(rng)
    return a + t[..., None] * (b - a)


def _checker(rng, size):
    period = int(rng.integers(4, 17))
    yy, xx = np.mgrid[0:size, 0:size]
    phase = ((yy // period) + (xx // period)) % 2
    a, b = _colour(rng), _colour(rng)
    return np.where(phase[..., None] == 1, a, b)


def _blobs(rng, size):
    img = np.tile(_colour(rng) * 0.5, (size, size, 1))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, size, 2)
        s = rng.uniform(size / 16, size / 4)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img = img + g[..., None] * (rng.uniform(-0.6, 0.6, 3))
    return img


def band_noise(rng, size, sigma=None):
    """Stationary band-limited colour noise with a fixed marginal distribution."""
    sigma = rng.uniform(2.0, 5.0) if sigma is None else sigma
    noise = rng.normal(size=(size, size, 3))
    smooth = np.stack([ndimage.gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(3)], -1)
    smooth /= smooth.std() + 1e-12
    return 0.5 + 0.15 * smooth


_BACKGROUND_FN = {"gradient": _gradient, "checker": _checker, "blobs": _blobs, "noise": band_noise}


def _shape_mask(rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
    ry, rx = rng.uniform(size * 0.1, size * 0.3, 2)
    kind = rng.integers(0, 3)
    if kind == 0:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == 1:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # triangle pointing up
    top = cy - ry
    frac = np.clip((yy - top) / (2 * ry), 0, None)
    return (yy >= top) & (yy <= cy + ry) & (np.abs(xx - cx) <= frac * rx)


def synthetic_sample(rng: np.random.Generator, size: int = 64) -> Sample:
    kind = BACKGROUNDS[int(rng.integers(0, len(BACKGROUNDS)))]
    img = _BACKGROUND_FN[kind](rng, size)
    saliency = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 3))):
        mask = _shape_mask(rng, size)
        fill = band_noise(rng, size) if rng.random() < 0.5 else np.tile(_colour(rng), (size, size, 1))
        img = np.where(mask[..., None], fill, img)
        saliency |= mask
    return Sample(np.clip(img, 0.0, 1.0), saliency.astype(np.uint8), kind)


def synthetic_corpus(count: int, seed: int = 0, size: int = 64) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [synthetic_sample(rng, size) for _ in range(count)]


def half_texture_samples(count: int, seed: int = 0, size: int = 64) -> list[Sample]:
    """One stationary texture over the whole frame; a random half is labelled salient."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        img = np.clip(band_noise(rng, size, sigma=3.0), 0.0, 1.0)
        saliency = np.zeros((size, size), dtype=np.uint8)
        side = int(rng.integers(0, 4))
        half = size // 2
        if side == 0:
            saliency[:, :half] = 1
        elif side == 1:
            saliency[:, half:] = 1
        elif side == 2:
            saliency[:half] = 1
        else:
            saliency[half:] = 1
        out.append(Sample(img, saliency, f"half{i}"))
    return out


def load_directory(path) -> list[Sample]:
    """Every ``*.ppm`` in ``path``; a sibling ``<stem>.pgm`` supplies saliency (else all salient)."""
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".ppm"))
    out = []
    for name in names:
        img = read_ppm(os.path.join(path, name))
        mask_path = os.path.join(path, name[:-4] + ".pgm")
        if os.path.exists(mask_path):
            sal = (read_pgm(mask_path) >= 128).astype(np.uint8)
        else:
            sal = np.ones(img.shape[:2], dtype=np.uint8)
        out.append(Sample(img, sal, name[:-4]))
    return out


def save_directory(path, samples: list[Sample]) -> None:
    os.makedirs(path, exist_ok=True)
    for i, s in enumerate(samples):
        stem = s.name or f"img{i:04d}"
        stem = f"{i:04d}_{stem}"
        write_ppm(os.path.join(path, stem + ".ppm"), s.image)
        write_pgm(os.path.join(path, stem + ".pgm"), s.saliency * 255)


def load_corpus(spec: str) -> list[Sample]:
    """``synthetic:N[:seed]`` or a directory path."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        count = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
        return synthetic_corpus(count, seed)
    if spec.startswith("halftexture:"):
        parts = spec.split(":")
        return half_texture_samples(int(parts[1]), int(parts[2]) if len(parts) > 2 else 0)
    if not os.path.isdir(spec):
        raise FileNotFoundError(f"corpus directory not found: {spec}")
    return load_directory(spec)


def saliency_of(sample: Sample, factor: int = 8) -> SaliencyMask:
    return SaliencyMask(sample.saliency_grid(factor), "ground_truth")

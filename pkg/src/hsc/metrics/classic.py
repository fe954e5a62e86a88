"""PSNR and MS-SSIM on [0, 1] images, evaluated on the 8-bit scale."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

PEAK = 255.0
# canonical per-scale exponents of the multi-scale SSIM reference construction
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(x, xhat):
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {xhat.shape}")
    return x, xhat


def mse8(x, xhat) -> float:
    x, xhat = _pair(x, xhat)
    return float(np.mean(((x - xhat) * PEAK) ** 2))


def psnr(x, xhat) -> float:
    """20 log10(255 / rmse) on the 8-bit scale; ``inf`` for identical images."""
    err = mse8(x, xhat)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(PEAK) - 10.0 * math.log10(err)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r * r / (2 * sigma * sigma))
    return g / g.sum()


def _filter(img, win):
    """Separable valid-mode filtering of a 2-D array."""
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_terms(a: np.ndarray, b: np.ndarray, win=None):
    """Mean luminance term and mean contrast-structure term for two 2-D images (8-bit scale)."""
    win = gaussian_window() if win is None else win
    c1, c2 = (K1 * PEAK) ** 2, (K2 * PEAK) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    var_a = _filter(a * a, win) - mu_a ** 2
    var_b = _filter(b * b, win) - mu_b ** 2
    cov = _filter(a * b, win) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(lum.mean()), float(cs.mean())


def scales_for(shape, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Largest number of dyadic scales whose coarsest level still fits the window."""
    smallest = min(shape[:2])
    scales = 0
    while scales < max_scales and smallest >= WINDOW * 2 ** scales:
        scales += 1
    return scales


def _downsample(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(x, xhat, weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM averaged over colour channels.

    Images smaller than 176 pixels on a side use fewer scales with the
    leading exponents renormalized to sum to one.  Negative contrast terms
    are clamped to zero before exponentiation.
    """
    x, xhat = _pair(x, xhat)
    if x.ndim == 2:
        x, xhat = x[..., None], xhat[..., None]
    scales = scales_for(x.shape, len(weights))
    if scales == 0:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {WINDOW}x{WINDOW} window")
    w = np.asarray(weights[:scales], dtype=np.float64)
    w = w / w.sum()
    win = gaussian_window()
    per_channel = []
    for c in range(x.shape[2]):
        a, b = x[..., c] * PEAK, xhat[..., c] * PEAK
        value = 1.0
        for j in range(scales):
            lum, cs = ssim_terms(a, b, win)
            if j == scales - 1:
                value *= max(lum, 0.0) ** w[j] * max(cs, 0.0) ** w[j]
            else:
                value *= max(cs, 0.0) ** w[j]
                a, b = _downsample(a), _downsample(b)
        per_channel.append(value)
    return float(np.mean(per_channel))

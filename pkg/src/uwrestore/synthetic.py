"""Procedural toy images and two synthetic water-like corruptions.

Used by the smoke runs and the routing diagnostics; nothing here is needed
for real data.
"""
from __future__ import annotations

import numpy as np

from .core import ImagePlane


def clean_image(size: int, rng: np.random.Generator) -> ImagePlane:
    """Smooth colour gradients plus a few sinusoids and hard-edged discs."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, f1, f2, p = rng.uniform(-1, 1, 2).tolist() + rng.uniform(1, 6, 2).tolist() + [rng.uniform(0, 6.3)]
        img[..., c] = 0.5 + 0.2 * (a * xx + b * yy) + 0.15 * np.sin(2 * np.pi * (f1 * xx + f2 * yy) + p)
    for _ in range(3):
        cy, cx, r = rng.uniform(0.15, 0.85, 2).tolist() + [rng.uniform(0.06, 0.2)]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = rng.uniform(0.1, 0.9, 3)
    return ImagePlane(np.clip(img, 0.0, 1.0).astype(np.float32))


def color_shift(img: ImagePlane, strength: float = 0.6) -> ImagePlane:
    """Wavelength-dependent attenuation towards a blue-green veil (red fades fastest)."""
    trans = 1.0 - strength * np.array([0.8, 0.35, 0.25])
    veil = np.array([0.05, 0.45, 0.55])
    out = img.data * trans + veil * (1.0 - trans)
    return ImagePlane(np.clip(out, 0.0, 1.0).astype(np.float32))


def gaussian_kernel1d(sigma: float, radius: int = None) -> np.ndarray:
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: ImagePlane, sigma: float = 1.5) -> ImagePlane:
    """Separable Gaussian blur with reflected borders."""
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    x = np.pad(img.data.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="reflect")
    x = sum(k[i] * x[i:i + img.shape[0]] for i in range(len(k)))
    x = sum(k[i] * x[:, i:i + img.shape[1]] for i in range(len(k)))
    return ImagePlane(np.clip(x, 0.0, 1.0).astype(np.float32))


def toy_pairs(n: int, size: int, degradation: str = "color", seed: int = 0):
    """``n`` (degraded, clean) ImagePlane pairs; ``degradation`` is ``color`` or ``blur``."""
    rng = np.random.default_rng(seed)
    fn = {"color": color_shift, "blur": blur}[degradation]
    out = []
    for _ in range(n):
        gt = clean_image(size, rng)
        out.append((fn(gt), gt))
    return out

"""Full-reference (PSNR, SSIM) and no-reference (UCIQE, UIQM) image quality metrics.

All functions take channel-last unit-interval ``ImagePlane`` images or plain
``[H, W, C]`` arrays and work in float64.
"""
from __future__ import annotations

import csv
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ImagePlane, InvalidInputError

# UCIQE weights (Yang & Sowmya, 2015): chroma spread, luminance contrast, mean saturation
UCIQE_WEIGHTS = (0.4680, 0.2745, 0.2576)
# UIQM weights (Panetta, Gao & Agaian, 2016): colourfulness, sharpness, contrast
UIQM_WEIGHTS = (0.0282, 0.2953, 3.5753)
LUMA = np.array([0.299, 0.587, 0.114])

# linear sRGB -> XYZ (D65); the white point is taken as the row sums so that
# grey pixels land exactly on a = b = 0
SRGB_TO_XYZ = np.array([[0.412453, 0.357580, 0.180423],
                        [0.212671, 0.715160, 0.072169],
                        [0.019334, 0.119193, 0.950227]])
WHITE = SRGB_TO_XYZ.sum(axis=1)


def _arr(img) -> np.ndarray:
    d = img.data if isinstance(img, ImagePlane) else np.asarray(img)
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    if d.ndim != 3:
        raise InvalidInputError(f"expected an [H, W, C] image, got shape {d.shape}")
    return d


def _rgb(img) -> np.ndarray:
    d = _arr(img)
    if d.shape[2] != 3:
        raise InvalidInputError(f"expected 3 channels, got {d.shape[2]}")
    return d


def luminance(img) -> np.ndarray:
    d = _arr(img)
    return d[..., 0] if d.shape[2] == 1 else d[..., :3] @ LUMA


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR over all pixels and channels; identical images give ``inf``."""
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def ssim(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Mean SSIM of the luminance channel over all fully-covered Gaussian windows."""
    x, y = luminance(a), luminance(b)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < win_size:
        raise InvalidInputError(f"image {x.shape[0]}x{x.shape[1]} is smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] -> CIELAB (L in [0, 100])."""
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    t = (lin @ SRGB_TO_XYZ.T) / WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    A = 500.0 * (f[..., 0] - f[..., 1])
    B = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, A, B], axis=-1)


def uciqe_components(img) -> Dict[str, float]:
    lab = srgb_to_lab(_rgb(img)) / 100.0
    L, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    chroma = np.hypot(a, b)
    sat = np.divide(chroma, L, out=np.zeros_like(chroma), where=L > 0)
    return {
        "chroma_std": float(np.std(chroma)),
        "luma_contrast": float(np.quantile(L, 0.99) - np.quantile(L, 0.01)),
        "saturation_mean": float(np.mean(sat)),
    }


def uciqe(img) -> float:
    c = uciqe_components(img)
    w = UCIQE_WEIGHTS
    return w[0] * c["chroma_std"] + w[1] * c["luma_contrast"] + w[2] * c["saturation_mean"]


def trimmed_mean(x: np.ndarray, alpha_l: float = 0.1, alpha_r: float = 0.1) -> float:
    """Drop ``ceil(alpha_l k)`` smallest and ``floor(alpha_r k)`` largest samples (always keeping one)."""
    s = np.sort(x.ravel())
    k = s.size
    hi = int(math.floor(alpha_r * k))
    lo = min(int(math.ceil(alpha_l * k)), k - 1 - hi)
    return float(s[lo:k - hi].mean())


def uicm(rgb255: np.ndarray) -> float:
    r, g, b = rgb255[..., 0], rgb255[..., 1], rgb255[..., 2]
    rg, yb = r - g, 0.5 * (r + g) - b
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    var_rg, var_yb = np.mean((rg - mu_rg) ** 2), np.mean((yb - mu_yb) ** 2)
    return float(-0.0268 * math.hypot(mu_rg, mu_yb) + 0.1586 * math.sqrt(var_rg + var_yb))


def sobel_magnitude(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, 1, mode="reflect")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def _blocks(x: np.ndarray, block: int) -> np.ndarray:
    k1, k2 = x.shape[0] // block, x.shape[1] // block
    if k1 == 0 or k2 == 0:
        raise InvalidInputError(f"image {x.shape[0]}x{x.shape[1]} holds no full {block}x{block} block")
    x = x[:k1 * block, :k2 * block]
    return x.reshape(k1, block, k2, block).swapaxes(1, 2).reshape(k1 * k2, block * block)


def eme(x: np.ndarray, block: int = 8) -> float:
    """``2 / (k1 k2) * sum log(max / min)`` over blocks; blocks with a zero extreme add 0."""
    bl = _blocks(x, block)
    mx, mn = bl.max(axis=1), bl.min(axis=1)
    ok = mn > 0
    terms = np.log(np.divide(mx, mn, out=np.ones_like(mx), where=ok))
    return float(2.0 / len(bl) * terms.sum())


def uism(rgb255: np.ndarray, block: int = 8) -> float:
    emes = [eme(sobel_magnitude(rgb255[..., c]) * rgb255[..., c], block) for c in range(3)]
    return float(LUMA @ np.array(emes))


def uiconm(rgb255: np.ndarray, block: int = 8) -> float:
    """``-1 / (k1 k2) * sum r log r`` with ``r = (max - min) / (max + min)`` per block of intensity."""
    bl = _blocks(rgb255 @ LUMA, block)
    mx, mn = bl.max(axis=1), bl.min(axis=1)
    s = mx + mn
    r = np.divide(mx - mn, s, out=np.zeros_like(s), where=s > 0)
    terms = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0)
    return float(0.0 - terms.sum() / len(bl))


def uiqm_components(img, block: int = 8) -> Dict[str, float]:
    x = _rgb(img) * 255.0
    return {"uicm": uicm(x), "uism": uism(x, block), "uiconm": uiconm(x, block)}


def uiqm(img, block: int = 8) -> float:
    c = uiqm_components(img, block)
    w = UIQM_WEIGHTS
    return w[0] * c["uicm"] + w[1] * c["uism"] + w[2] * c["uiconm"]


FULL_REF = ("psnr", "ssim")
NO_REF = ("uciqe", "uiqm")


@dataclass
class MetricReport:
    """Per-image scores plus column means."""

    rows: List[Dict[str, object]] = field(default_factory=list)

    def add(self, image: str, **scores: float):
        self.rows.append({"image": image, **scores})

    @property
    def columns(self) -> List[str]:
        cols = []
        for r in self.rows:
            cols += [k for k in r if k != "image" and k not in cols]
        return cols

    def means(self) -> Dict[str, float]:
        return {c: float(np.mean([r[c] for r in self.rows if c in r])) for c in self.columns}

    def write_csv(self, path):
        cols = self.columns
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image"] + cols)
            for r in self.rows:
                w.writerow([r["image"]] + [_fmt(r.get(c)) for c in cols])
            means = self.means()
            w.writerow(["mean"] + [_fmt(means[c]) for c in cols])

    def plot_histograms(self, path):
        """One histogram panel per metric (PNG or SVG by suffix); needs matplotlib."""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        cols = self.columns
        fig, axes = plt.subplots(1, len(cols), figsize=(3.2 * len(cols), 2.8), squeeze=False)
        for ax, c in zip(axes[0], cols):
            vals = [r[c] for r in self.rows if c in r and math.isfinite(r[c])]
            ax.hist(vals, bins=min(20, max(1, len(vals))))
            ax.set_title(c)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def score_pair(restored, gt=None) -> Dict[str, float]:
    out = {}
    if gt is not None:
        out["psnr"] = psnr(restored, gt)
        out["ssim"] = ssim(restored, gt)
    out["uciqe"] = uciqe(restored)
    out["uiqm"] = uiqm(restored)
    return out


def external_scores(paths: Sequence[Path], command: str) -> Dict[str, float]:
    """Hook for learned metrics living outside this package.

    Runs ``<command> <in.csv> <out.csv>``: the input CSV has one ``path``
    column, the command writes ``path,score`` rows back.
    """
    with tempfile.TemporaryDirectory(prefix="uwscore") as tmp:
        src, dst = Path(tmp) / "in.csv", Path(tmp) / "out.csv"
        with open(src, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path"])
            w.writerows([[str(p)] for p in paths])
        proc = subprocess.run(shlex.split(command) + [str(src), str(dst)], capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"scorer exited with {proc.returncode}: {proc.stderr.strip()}")
        with open(dst, newline="", encoding="utf-8") as fh:
            return {row["path"]: float(row["score"]) for row in csv.DictReader(fh)}

"""Depth maps: a differentiable stub and an external-command client."""
from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import DepthRaster, ImagePlane, InvalidInputError

LUMA = (0.299, 0.587, 0.114)
BLUR_RADIUS = 2


class DepthProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class DepthProviderSpec:
    mode: str = "stub"
    external_command: Optional[str] = None
    differentiable: bool = True

    def __post_init__(self):
        if self.mode not in ("stub", "external"):
            raise InvalidInputError(f"unknown depth provider mode {self.mode!r}")
        if self.mode == "external":
            if not self.external_command:
                raise InvalidInputError("external depth mode needs external_command")
            object.__setattr__(self, "differentiable", False)
        else:
            object.__setattr__(self, "differentiable", True)


def _reflect_pad(x: torch.Tensor, r: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    hi = torch.from_numpy(_centred_reflect(h, r))
    wi = torch.from_numpy(_centred_reflect(w, r))
    return x.index_select(-2, hi).index_select(-1, wi)


def _centred_reflect(n: int, r: int) -> np.ndarray:
    i = np.arange(-r, n + r)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


def stub_depth(x: torch.Tensor) -> torch.Tensor:
    """Blurred inverse luminance, ``[B, 3, H, W] -> [B, 1, H, W]``.

    Differentiable w.r.t. ``x``; stays in [0, 1] for inputs in [0, 1].
    """
    w = x.new_tensor(LUMA).view(1, 3, 1, 1)
    inv = 1.0 - (x * w).sum(1, keepdim=True)
    k = 2 * BLUR_RADIUS + 1
    return F.avg_pool2d(_reflect_pad(inv, BLUR_RADIUS), k, stride=1)


def normalize_depth(raw, provenance: str = "external") -> DepthRaster:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("depth map contains NaN or Inf")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return DepthRaster(np.full(raw.shape, 0.5), provenance)
    return DepthRaster(np.clip((raw - lo) / (hi - lo), 0.0, 1.0), provenance)


def downsample_depth(d: DepthRaster, level: int) -> DepthRaster:
    if level not in (0, 1, 2, 3):
        raise InvalidInputError(f"level must be in 0..3, got {level}")
    h, w = d.shape
    f = 2 ** level
    if h % f or w % f:
        raise InvalidInputError(f"{h}x{w} depth map is not divisible by {f}")
    data = d.data
    for _ in range(level):
        data = 0.25 * (data[0::2, 0::2] + data[1::2, 0::2] + data[0::2, 1::2] + data[1::2, 1::2])
    return DepthRaster(data, d.provenance)


def write_png16(path, depth: np.ndarray) -> None:
    arr = np.round(np.clip(depth, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float64)


def run_external(img: ImagePlane, command: str) -> DepthRaster:
    """Run ``<command> <in.png> <out.png>`` and read back a 16-bit depth PNG."""
    h, w = img.shape[:2]
    with tempfile.TemporaryDirectory(prefix="uwdepth") as tmp:
        src, dst = Path(tmp) / "in.png", Path(tmp) / "out.png"
        rgb = np.round(img.data[..., :3] * 255.0).astype(np.uint8)
        Image.fromarray(rgb).save(src)
        argv = shlex.split(command) + [str(src), str(dst)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except OSError as exc:
            raise DepthProviderError(f"could not start depth command {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise DepthProviderError(
                f"depth command exited with {proc.returncode}\nstdout:\n{proc.stdout}\nstderr:\n{proc.stderr}")
        if not dst.exists():
            raise DepthProviderError(f"depth command wrote no output\nstderr:\n{proc.stderr}")
        raw = read_png16(dst)
    if raw.shape != (h, w):
        raise DepthProviderError(f"depth map is {raw.shape[0]}x{raw.shape[1]}, image is {h}x{w}")
    return normalize_depth(raw, "external")


def predict_depth(img: ImagePlane, spec: DepthProviderSpec = DepthProviderSpec()) -> DepthRaster:
    if img.shape[2] != 3:
        raise InvalidInputError("depth prediction needs an RGB image")
    if spec.mode == "external":
        return run_external(img, spec.external_command)
    with torch.no_grad():
        d = stub_depth(img.to_tensor(torch.float64))[0, 0].numpy()
    return DepthRaster(np.clip(d, 0.0, 1.0), "stub")

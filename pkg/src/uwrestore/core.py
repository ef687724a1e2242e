"""Shared value types, padding helpers and seeding."""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch


class InvalidInputError(ValueError):
    pass


UNIT_INTERVAL = "unit_interval"
UNBOUNDED = "unbounded_feature"


@dataclass(frozen=True)
class ImagePlane:
    """Channel-last ``[H, W, C]`` image or feature map."""

    data: np.ndarray
    value_domain: str = UNIT_INTERVAL

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or min(d.shape) < 1:
            raise InvalidInputError(f"ImagePlane needs a non-empty [H, W, C] array, got {d.shape}")
        if self.value_domain not in (UNIT_INTERVAL, UNBOUNDED):
            raise InvalidInputError(f"unknown value domain {self.value_domain!r}")
        if self.value_domain == UNIT_INTERVAL and (d.min() < 0.0 or d.max() > 1.0):
            raise InvalidInputError("unit_interval image has values outside [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return a ``[1, C, H, W]`` tensor."""
        return torch.from_numpy(self.data.transpose(2, 0, 1).copy()).to(dtype)[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor, value_domain=UNIT_INTERVAL) -> "ImagePlane":
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise InvalidInputError("from_tensor expects a batch of one")
            t = t[0]
        return cls(t.detach().cpu().numpy().transpose(1, 2, 0).copy(), value_domain)


PRIOR_KINDS = ("prior_Z", "condition_C", "denoised_Zhat", "noisy_Zt")


@dataclass(frozen=True)
class PriorVector:
    data: np.ndarray
    kind: str = "prior_Z"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 1:
            raise InvalidInputError("PriorVector must be one-dimensional")
        if not np.all(np.isfinite(d)):
            raise InvalidInputError("PriorVector has non-finite entries")
        if self.kind not in PRIOR_KINDS:
            raise InvalidInputError(f"unknown prior kind {self.kind!r}")
        object.__setattr__(self, "data", d)

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class DepthRaster:
    data: np.ndarray
    provenance: str = "stub"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise InvalidInputError("DepthRaster must be [H, W]")
        if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
            raise InvalidInputError("depth values must be finite and lie in [0, 1]")
        if self.provenance not in ("stub", "external"):
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


def padded_size(n: int, m: int) -> int:
    return -(-n // m) * m


def reflect_indices(n: int, size: int) -> np.ndarray:
    """Source indices for reflect-extending an axis of length ``n`` to ``size``.

    Reflection excludes the edge sample (``d c b | a b c d | c b a``) and keeps
    bouncing for pads longer than the axis. A length-1 axis repeats its pixel.
    """
    i = np.arange(size)
    if n == 1:
        return np.zeros(size, dtype=np.int64)
    period = 2 * (n - 1)
    i = i % period
    return np.where(i >= n, period - i, i)


def pad_to_multiple(img: ImagePlane, m: int) -> Tuple[ImagePlane, Optional[Tuple[int, int]]]:
    """Reflect-pad bottom/right so H and W become multiples of ``m``.

    Returns the padded plane and the original ``(H, W)``, or ``None`` when no
    padding was needed.
    """
    if m not in (8, 16):
        raise InvalidInputError(f"pad multiple must be 8 or 16, got {m}")
    h, w = img.shape[:2]
    hp, wp = padded_size(h, m), padded_size(w, m)
    if (hp, wp) == (h, w):
        return img, None
    data = img.data[reflect_indices(h, hp)][:, reflect_indices(w, wp)]
    return ImagePlane(data, img.value_domain), (h, w)


def crop_to(img: ImagePlane, record: Optional[Tuple[int, int]]) -> ImagePlane:
    if record is None:
        return img
    h, w = record
    return ImagePlane(img.data[:h, :w], img.value_domain)


def pad_tensor(x: torch.Tensor, m: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Tensor counterpart of :func:`pad_to_multiple` for ``[B, C, H, W]``."""
    h, w = x.shape[-2:]
    hi = torch.from_numpy(reflect_indices(h, padded_size(h, m))).to(x.device)
    wi = torch.from_numpy(reflect_indices(w, padded_size(w, m))).to(x.device)
    return x.index_select(-2, hi).index_select(-1, wi), (h, w)


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


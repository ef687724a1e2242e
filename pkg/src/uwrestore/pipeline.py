"""Model bundle and the degraded-image-only inference path."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone
from .config import RunConfig
from .core import ImagePlane, crop_to, pad_to_multiple
from .depth import DepthProviderSpec, normalize_depth, read_png16, run_external, stub_depth, write_png16
from .lcdm import Denoiser, sample, schedule_from_config
from .sfpg import SFPG


class Models(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        w0 = cfg.stage_widths[0]
        self.sfpg = SFPG(w0, cfg.prior_dim, cfg.num_prompts, paired=True)
        self.sfpg_star = SFPG(w0, cfg.prior_dim, cfg.num_prompts, paired=False)
        self.denoiser = Denoiser(cfg.prior_dim)
        self.backbone = Backbone(cfg.stage_widths, cfg.stage_depths, cfg.prior_dim, d_state=cfg.d_state,
                                 expand=cfg.ssm_expand, num_experts=cfg.num_experts, top_k=cfg.top_k)
        self.trained_stage = 0    # last training stage these weights completed or were saved from


def build_models(cfg: RunConfig, seed: Optional[int] = None) -> Models:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return Models(cfg)


class DepthService:
    """Batched depth maps for the trainer and the restorer.

    Stub mode is differentiable. External mode calls the command once per
    image and memoises results by content hash (in memory and, when
    ``cache_dir`` is set, as 16-bit PNGs on disk).
    """

    def __init__(self, spec: DepthProviderSpec = DepthProviderSpec(), cache_dir=None):
        self.spec = spec
        self.cache_dir = cache_dir
        self._memo = {}

    @property
    def differentiable(self):
        return self.spec.differentiable

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.mode == "stub":
            return stub_depth(x)
        maps = [self._external_one(img) for img in x.detach()]
        return torch.stack(maps).to(x.dtype)[:, None]

    def _external_one(self, img: torch.Tensor) -> torch.Tensor:
        plane = ImagePlane.from_tensor(img.clamp(0, 1))
        rgb8 = np.round(plane.data * 255).astype(np.uint8)
        key = hashlib.sha256(rgb8.tobytes() + str(rgb8.shape).encode()).hexdigest()
        if key not in self._memo:
            self._memo[key] = self._cached(key, plane)
        return torch.from_numpy(self._memo[key])

    def _cached(self, key, plane):
        if self.cache_dir is not None:
            path = Path(self.cache_dir) / f"{key}.png"
            if path.exists():
                return normalize_depth(read_png16(path)).data
        d = run_external(plane, self.spec.external_command).data
        if self.cache_dir is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            write_png16(path, d)
        return d


@torch.no_grad()
def restore_tensor(models: Models, x: torch.Tensor, cfg: RunConfig, depth: DepthService,
                   generator: Optional[torch.Generator] = None, mode: str = "infer") -> torch.Tensor:
    """Degraded image ``[B, 3, H, W]`` (H, W divisible by 8) -> restored image."""
    c = models.sfpg_star(x)
    z_hat = sample(c, models.denoiser, schedule_from_config(cfg), generator)
    models.backbone.set_routing(mode)
    return models.backbone(x, z_hat, depth(x))


def restore_image(models: Models, img: ImagePlane, cfg: RunConfig, depth: DepthService,
                  generator: Optional[torch.Generator] = None) -> ImagePlane:
    padded, record = pad_to_multiple(img, 8)
    out = restore_tensor(models, padded.to_tensor(), cfg, depth, generator)
    return crop_to(ImagePlane.from_tensor(out.clamp(0, 1)), record)

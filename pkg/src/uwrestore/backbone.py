"""U-shaped restorer built from prior- and depth-conditioned MMoE blocks."""
from __future__ import annotations

from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidInputError
from .vssm import VSSM, ChannelNorm
from .wmoe import WMoE


class PriorModulation(nn.Module):
    """``x * scale(z) + shift(z)`` with scale/shift broadcast over space."""

    def __init__(self, dim, init_std=0.02):
        super().__init__()
        self.scale = nn.Linear(dim, dim)
        self.shift = nn.Linear(dim, dim)
        nn.init.normal_(self.scale.weight, std=init_std)
        nn.init.ones_(self.scale.bias)
        nn.init.normal_(self.shift.weight, std=init_std)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x, z_n):
        if z_n.shape[-1] != self.scale.in_features:
            raise InvalidInputError(f"prior has length {z_n.shape[-1]}, expected {self.scale.in_features}")
        return x * self.scale(z_n)[:, :, None, None] + self.shift(z_n)[:, :, None, None]


class DepthGate(nn.Module):
    """``LN(F) * softmax_c(relu(conv3x3(depth)))``: a per-pixel channel gate."""

    def __init__(self, dim):
        super().__init__()
        self.norm = ChannelNorm(dim)
        self.conv = nn.Conv2d(1, dim, 3, padding=1)

    def gate(self, depth):
        return torch.softmax(F.relu(self.conv(depth)), dim=1)

    def forward(self, fd, depth):
        if depth.shape[-2:] != fd.shape[-2:]:
            raise InvalidInputError(f"depth {tuple(depth.shape[-2:])} does not match features {tuple(fd.shape[-2:])}")
        return self.norm(fd) * self.gate(depth)


class MMoEB(nn.Module):
    def __init__(self, dim, d_state=16, expand=1, num_experts=3, top_k=2, zero_init_residual=False):
        super().__init__()
        self.norm1 = ChannelNorm(dim)
        self.modulation = PriorModulation(dim)
        self.vssm = VSSM(dim, d_state=d_state, expand=expand, zero_init_out=zero_init_residual)
        self.depth_gate = DepthGate(dim)
        self.wmoe = WMoE(dim, num_experts, top_k)
        if zero_init_residual:
            for e in self.wmoe.experts:
                nn.init.zeros_(e.t3.weight)

    def forward(self, x, z_n, depth):
        fd = self.vssm(self.modulation(self.norm1(x), z_n)) + x
        fd_hat = self.depth_gate(fd, depth)
        return self.wmoe(self.modulation(fd_hat, z_n)) + fd


class Stage(nn.Module):
    """A run of MMoE blocks sharing one projection of the prior to stage width."""

    def __init__(self, dim, depth, prior_dim, **block_kw):
        super().__init__()
        self.prior_proj = nn.Linear(prior_dim, dim)
        self.blocks = nn.ModuleList(MMoEB(dim, **block_kw) for _ in range(depth))

    def forward(self, x, z, depth):
        z_n = self.prior_proj(z)
        for blk in self.blocks:
            x = blk(x, z_n, depth)
        return x


def depth_pyramid(depth: torch.Tensor, levels: int) -> List[torch.Tensor]:
    out = [depth]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], 2))
    return out


class Backbone(nn.Module):
    """Stem, three encoder stages with strided downsampling, a bottleneck stage,
    three decoder stages (nearest x2 + conv, concat skip, 1x1 fuse) and a
    zero-initialised head added to the input image.
    """

    def __init__(self, widths=(32, 64, 128, 256), depths=(3, 5, 6, 6), prior_dim=256,
                 d_state=16, expand=1, num_experts=3, top_k=2, zero_init_residual=False):
        super().__init__()
        widths, depths = list(widths), list(depths)
        kw = dict(d_state=d_state, expand=expand, num_experts=num_experts, top_k=top_k,
                  zero_init_residual=zero_init_residual)
        self.levels = len(widths)
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.encoders = nn.ModuleList(Stage(widths[i], depths[i], prior_dim, **kw) for i in range(self.levels - 1))
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(self.levels - 1))
        self.bottleneck = Stage(widths[-1], depths[-1], prior_dim, **kw)
        self.ups = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(self.levels - 1))
        self.fuse = nn.ModuleList(nn.Conv2d(2 * widths[i], widths[i], 1) for i in range(self.levels - 1))
        self.decoders = nn.ModuleList(Stage(widths[i], depths[i], prior_dim, **kw) for i in range(self.levels - 1))
        self.head = nn.Conv2d(widths[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self._name_moe_layers()

    def _name_moe_layers(self):
        for name, mod in self.named_modules():
            if isinstance(mod, WMoE):
                mod.name = name

    def moe_layers(self) -> List[WMoE]:
        return [m for m in self.modules() if isinstance(m, WMoE)]

    def set_routing(self, mode: Optional[str] = None):
        """Force ``"train"`` (dense) or ``"infer"`` (top-k) routing; None follows ``self.training``."""
        for m in self.moe_layers():
            m.mode = mode

    def track_usage(self, usage=None):
        for m in self.moe_layers():
            m.usage = usage

    def forward(self, x_lq, z, depth, clip=True):
        f = 2 ** (self.levels - 1)
        if x_lq.shape[-2] % f or x_lq.shape[-1] % f:
            raise InvalidInputError(f"input {x_lq.shape[-2]}x{x_lq.shape[-1]} is not divisible by {f}")
        if depth.dim() == 3:
            depth = depth[:, None]
        depths = depth_pyramid(depth, self.levels)
        x = self.stem(x_lq)
        skips = []
        for i, (enc, down) in enumerate(zip(self.encoders, self.downs)):
            x = enc(x, z, depths[i])
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x, z, depths[-1])
        for i in reversed(range(self.levels - 1)):
            x = self.ups[i](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self.fuse[i](torch.cat([x, skips[i]], dim=1))
            x = self.decoders[i](x, z, depths[i])
        out = x_lq + self.head(x)
        return out.clamp(0.0, 1.0) if clip else out

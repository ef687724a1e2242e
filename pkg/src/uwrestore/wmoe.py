"""Water mixture-of-experts feed-forward layer with low-rank gated experts."""
from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidInputError


def expert_rank(index: int) -> int:
    """Intermediate width of the ``index``-th expert (1-based): ``2 ** (index + 1)``."""
    return 2 ** (index + 1)


class LowRankExpert(nn.Module):
    def __init__(self, dim, index):
        super().__init__()
        self.index = index
        rank = expert_rank(index)
        self.t1 = nn.Conv2d(dim, rank, 1, bias=False)
        self.t2 = nn.Conv2d(dim, rank, 1, bias=False)
        self.t3 = nn.Conv2d(rank, dim, 1, bias=False)

    def forward(self, fa, fb_local):
        return self.t3(self.t1(fa) * self.t2(fb_local))


class Router(nn.Module):
    def __init__(self, dim, num_experts):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, num_experts)

    def forward(self, feat):
        return self.fc2(F.relu(self.fc1(feat.mean(dim=(2, 3)))))


def top_k_indices(w: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest weights per row, equal weights ordered by index."""
    if not 1 <= k <= w.shape[-1]:
        raise InvalidInputError(f"k={k} outside 1..{w.shape[-1]}")
    return torch.sort(w, dim=-1, descending=True, stable=True).indices[..., :k]


class ExpertUsage:
    """Accumulates how often each expert is picked by top-k routing."""

    def __init__(self, num_experts):
        self.num_experts = num_experts
        self.counts = Counter()
        self.by_layer = {}

    def record(self, layer: str, idx: torch.Tensor):
        ids = idx.flatten().tolist()
        self.counts.update(ids)
        self.by_layer.setdefault(layer, Counter()).update(ids)

    def total(self):
        return sum(self.counts.values())

    def histogram(self):
        return [self.counts.get(i, 0) for i in range(self.num_experts)]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["expert_id", "count"])
            for i, n in enumerate(self.histogram()):
                writer.writerow([i, n])


class WMoE(nn.Module):
    """Projection + split, depthwise local branch, routed low-rank experts.

    In training mode every expert runs and outputs are mixed with the full
    softmax weights. In eval mode only the top-k experts run per sample and
    their (unrenormalised) weights are applied.
    """

    def __init__(self, dim, num_experts=3, top_k=2):
        super().__init__()
        if not 1 <= top_k <= num_experts:
            raise InvalidInputError(f"top_k={top_k} outside 1..{num_experts}")
        self.dim, self.num_experts, self.top_k = dim, num_experts, top_k
        self.proj = nn.Conv2d(dim, 2 * dim, 3, padding=1, bias=False)
        self.dwconv = nn.Conv2d(dim, dim, 3, padding=1, groups=dim, bias=False)
        self.experts = nn.ModuleList(LowRankExpert(dim, i + 1) for i in range(num_experts))
        self.router = Router(dim, num_experts)
        self.mode: Optional[str] = None          # None follows self.training
        self.usage: Optional[ExpertUsage] = None
        self.name = "wmoe"
        self.last_weights = None

    def split_views(self, fm):
        if fm.shape[1] != self.dim:
            raise InvalidInputError(f"expected {self.dim} channels, got {fm.shape[1]}")
        fa, fb = self.proj(fm).chunk(2, dim=1)
        return fa, self.dwconv(fb)

    def route(self, fb_local, k=None):
        k = self.top_k if k is None else k
        w = torch.softmax(self.router(fb_local), dim=-1)
        return w, top_k_indices(w, k)

    def forward(self, fm, mode=None, k=None):
        mode = mode or self.mode or ("train" if self.training else "infer")
        fa, fb_local = self.split_views(fm)
        w, idx = self.route(fb_local, k)
        self.last_weights = w.detach()
        if self.usage is not None:
            self.usage.record(self.name, idx)
        if mode == "train":
            out = 0
            for i, expert in enumerate(self.experts):
                out = out + w[:, i, None, None, None] * expert(fa, fb_local)
            return out
        if mode != "infer":
            raise InvalidInputError(f"unknown routing mode {mode!r}")
        out = torch.zeros_like(fm)
        chosen = torch.zeros_like(w, dtype=torch.bool).scatter_(1, idx, True)
        for i, expert in enumerate(self.experts):
            rows = chosen[:, i].nonzero().flatten()
            if rows.numel() == 0:
                continue
            y = expert(fa[rows], fb_local[rows]) * w[rows, i, None, None, None]
            out = out.index_add(0, rows, y)
        return out


def conv_flops(conv: nn.Conv2d, h: int, w: int) -> int:
    kh, kw = conv.kernel_size
    return 2 * h * w * conv.out_channels * (conv.in_channels // conv.groups) * kh * kw


def wmoe_flops(layer: WMoE, h: int, w: int, mode: str, k: Optional[int] = None) -> int:
    """Multiply-add count (x2) of the conv path for one sample."""
    k = layer.top_k if k is None else k
    total = conv_flops(layer.proj, h, w) + conv_flops(layer.dwconv, h, w)
    per_expert = []
    for e in layer.experts:
        f = conv_flops(e.t1, h, w) + conv_flops(e.t2, h, w) + conv_flops(e.t3, h, w)
        per_expert.append(f + e.t1.out_channels * h * w)     # gating product
    if mode == "train":
        return total + sum(per_expert)
    # worst case over which experts get picked
    return total + sum(sorted(per_expert, reverse=True)[:k])

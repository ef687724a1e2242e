"""Four-direction 2-D selective scan (vision state-space module)."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scan import fused_selective_scan, linear_scan

NUM_PATHS = 4


def scan_paths(x: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W] -> [B, 4, C, H*W]``.

    Paths: row-major, row-major reversed, column-major, column-major reversed.
    """
    rows = x.flatten(2)
    cols = x.transpose(2, 3).flatten(2)
    return torch.stack([rows, rows.flip(-1), cols, cols.flip(-1)], dim=1)


def refold_paths(seqs: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`scan_paths`: ``[B, 4, C, L] -> [B, 4, C, H, W]``."""
    b, k, c, _ = seqs.shape
    rows = seqs[:, 0]
    rows_r = seqs[:, 1].flip(-1)
    cols = seqs[:, 2].reshape(b, c, w, h).transpose(2, 3).flatten(2)
    cols_r = seqs[:, 3].flip(-1).reshape(b, c, w, h).transpose(2, 3).flatten(2)
    return torch.stack([rows, rows_r, cols, cols_r], dim=1).reshape(b, k, c, h, w)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of ``[B, C, H, W]``."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def selective_scan(x, delta, A, Bm, Cm, D=None, method="fused", chunk_size=None):
    """Diagonal SSM with zero-order-hold discretisation.

    Shapes (``...`` is any leading batch shape, ``N`` the state size)::

        x, delta : [..., C, L]      Bm, Cm : [..., N, L]
        A        : [C, N] (< 0)     D      : [C]

    ``A`` and ``D`` may carry extra leading dims that broadcast against ``...``.
    ``D=None`` drops the skip term.

    ``h[t] = exp(delta A) h[t-1] + expm1(delta A) / A * B[t] x[t]``,
    ``y[t] = C[t] . h[t] + D x[t]``.

    ``method="fused"`` runs the compiled single-pass kernel; ``"kernel"`` and
    ``"prefix"`` materialise the discretised tensors and hand them to
    :func:`linear_scan`. All three compute the same recurrence.
    """
    skip = 0 if D is None else D.unsqueeze(-1) * x
    if method == "fused":
        return fused_selective_scan(x, delta, A, Bm, Cm) + skip
    dA = delta.unsqueeze(-2) * A.unsqueeze(-1)                      # [..., C, N, L]
    a = torch.exp(dA)
    b = torch.expm1(dA) / A.unsqueeze(-1) * Bm.unsqueeze(-3) * x.unsqueeze(-2)
    h = linear_scan(a, b, method=method, chunk_size=chunk_size)
    y = (h * Cm.unsqueeze(-3)).sum(-2)
    return y + skip


class VSSM(nn.Module):
    """Global token mixer: selective scans along four paths, averaged, projected.

    Each path has its own step, input and output projections, decay rates and
    skip gain. The averaged state readout is layer-normalised per token before
    the skip term is added back: the slowest decay rates make the state a
    running sum over the whole image, whose scale grows with H*W. There is no
    gating branch. With ``expand > 1`` the scan runs at
    ``expand * dim`` channels between a 1x1 input and output projection;
    ``expand == 1`` scans the input directly.
    """

    def __init__(self, dim, d_state=16, expand=1, dt_min=1e-3, dt_max=1e-1, a_min=1e-4, a_max=1.0,
                 zero_init_out=False, scan_method="fused"):
        super().__init__()
        self.d_state = d_state
        self.scan_method = scan_method
        self.chunk_size = None
        inner = dim * expand
        self.in_proj = nn.Conv2d(dim, inner, 1) if expand > 1 else nn.Identity()
        dim, out_dim = inner, dim
        self.dim = dim
        k = NUM_PATHS
        self.dt_weight = nn.Parameter(torch.randn(k, dim, dim) * dim ** -0.5 * 0.1)
        dt = torch.exp(torch.rand(k, dim) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))   # inverse softplus
        self.b_weight = nn.Parameter(torch.randn(k, d_state, dim) * dim ** -0.5)
        self.c_weight = nn.Parameter(torch.randn(k, d_state, dim) * dim ** -0.5)
        rates = torch.exp(torch.linspace(math.log(a_min), math.log(a_max), d_state))
        self.a_log = nn.Parameter(torch.log(rates).repeat(k, dim, 1))
        self.D = nn.Parameter(torch.ones(k, dim))
        self.out_norm = ChannelNorm(dim)
        self.out_proj = nn.Conv2d(dim, out_dim, 1)
        if zero_init_out:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    @property
    def A(self):
        return -torch.exp(self.a_log)

    def forward(self, x):
        x = self.in_proj(x)
        b, c, h, w = x.shape
        seqs = scan_paths(x)                                           # [B, K, C, L]
        delta = F.softplus(torch.einsum("kdc,bkcl->bkdl", self.dt_weight, seqs) + self.dt_bias[..., None])
        Bm = torch.einsum("knc,bkcl->bknl", self.b_weight, seqs)
        Cm = torch.einsum("knc,bkcl->bknl", self.c_weight, seqs)
        y = selective_scan(seqs, delta, self.A, Bm, Cm, None, self.scan_method, self.chunk_size)
        y = refold_paths(y, h, w)
        # fixed reduction order keeps the result reproducible
        y = (y[:, 0] + y[:, 1] + y[:, 2] + y[:, 3]) / NUM_PATHS
        d = (self.D[0] + self.D[1] + self.D[2] + self.D[3]) / NUM_PATHS
        return self.out_proj(self.out_norm(y) + d[:, None, None] * x)

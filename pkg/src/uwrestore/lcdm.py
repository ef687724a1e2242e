"""Conditional DDPM over the prior vector."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidInputError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention ``alpha``, noise ``beta = 1 - alpha`` and cumulative
    ``alpha_bar``. Arrays are indexed from 0, so step ``t`` lives at ``t - 1``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    def check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise InvalidInputError(f"timestep {t} outside 1..{self.T}")


def make_schedule(steps: int, alpha_1: float = 0.99, alpha_T: float = 0.1) -> NoiseSchedule:
    if steps < 1:
        raise InvalidInputError("diffusion needs at least one step")
    if not 0.0 < alpha_T <= alpha_1 < 1.0:
        raise InvalidInputError("need 0 < alpha_T <= alpha_1 < 1")
    alpha = np.linspace(alpha_1, alpha_T, steps) if steps > 1 else np.array([alpha_1])
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(alpha, 1.0 - alpha, alpha_bar)


def schedule_from_config(cfg) -> NoiseSchedule:
    return make_schedule(cfg.diffusion_steps, cfg.alpha_1, cfg.alpha_T)


def _as_index(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, device=like.device)
    return t.reshape(-1, *([1] * (like.dim() - 1))) if t.dim() else t


def q_sample(z: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z + sqrt(1 - abar_t) eps``; ``t`` may be an int or a per-row tensor."""
    ts = torch.as_tensor(t)
    if ts.min() < 1 or ts.max() > sched.T:
        raise InvalidInputError(f"timestep outside 1..{sched.T}")
    abar = torch.as_tensor(sched.alpha_bar, dtype=z.dtype, device=z.device)[_as_index(t, z) - 1]
    return abar.sqrt() * z + (1.0 - abar).sqrt() * eps


def reverse_step(z_t: torch.Tensor, t: int, eps_pred: torch.Tensor, sched: NoiseSchedule,
                 noise: torch.Tensor = None) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}`` with variance ``1 - alpha_t``.

    The noise term is skipped at ``t == 1`` or when ``noise`` is None.
    """
    sched.check_t(t)
    a, abar = float(sched.alpha[t - 1]), float(sched.alpha_bar[t - 1])
    z = (z_t - (1.0 - a) / math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(a)
    if t > 1 and noise is not None:
        z = z + math.sqrt(1.0 - a) * noise
    return z


def timestep_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding ``[B, dim]`` of integer timesteps."""
    t = torch.as_tensor(t, dtype=dtype).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    emb = torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """Noise predictor ``eps(z_t, c, t)``: MLP over ``[z_t, c, emb(t)]``."""

    def __init__(self, prior_dim, slope=0.1):
        super().__init__()
        self.prior_dim = prior_dim
        self.slope = slope
        self.fc1 = nn.Linear(3 * prior_dim, 2 * prior_dim)
        self.fc2 = nn.Linear(2 * prior_dim, 2 * prior_dim)
        self.fc3 = nn.Linear(2 * prior_dim, prior_dim)

    def forward(self, z_t, c, t):
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        emb = timestep_embedding(t, self.prior_dim, z_t.dtype)
        h = F.leaky_relu(self.fc1(torch.cat([z_t, c, emb], dim=1)), self.slope)
        h = F.leaky_relu(self.fc2(h), self.slope)
        return self.fc3(h)


def reverse_chain(z_T, c, denoiser, sched: NoiseSchedule, generator=None, stochastic=True):
    """Run ``t = T..1`` from ``z_T``; differentiable through the denoiser."""
    z = z_T
    for t in range(sched.T, 0, -1):
        eps = denoiser(z, c, t)
        noise = None
        if stochastic and t > 1:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
        z = reverse_step(z, t, eps, sched, noise)
    return z


def sample(c, denoiser, sched: NoiseSchedule, generator=None) -> torch.Tensor:
    """Draw ``z_T ~ N(0, I)`` and denoise it to a prior estimate."""
    z_T = torch.randn(c.shape, generator=generator, dtype=c.dtype, device=c.device)
    return reverse_chain(z_T, c, denoiser, sched, generator)

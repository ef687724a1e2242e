"""Spatial-frequency prior generator.

Images are encoded, split into FFT amplitude and phase, refined by two
residual stacks, brought back to the spatial domain and pooled into softmax
weights over a bank of learnable prompts. The weighted prompt sum is the
degradation prior.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidInputError

SLOPE = 0.1
IMAG_TOL = 1e-5


class SpectralPair(NamedTuple):
    amplitude: torch.Tensor
    phase: torch.Tensor


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    if x.shape[-2] % r or x.shape[-1] % r:
        raise InvalidInputError(f"{x.shape[-2]}x{x.shape[-1]} is not divisible by {r}")
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    return F.pixel_shuffle(x, r)


def fft_split(x: torch.Tensor) -> SpectralPair:
    """Per-channel 2-D DFT of ``[..., H, W]`` as (modulus, argument).

    Exact zeros get phase 0, and the modulus/argument gradients there are 0
    instead of NaN.
    """
    if not torch.isfinite(x).all():
        raise InvalidInputError("fft_split input is not finite")
    z = torch.fft.fft2(x)
    re, im = z.real, z.imag
    zero = (re == 0) & (im == 0)
    re_s = torch.where(zero, torch.ones_like(re), re)
    im_s = torch.where(zero, torch.zeros_like(im), im)
    amp = torch.where(zero, torch.zeros_like(re), torch.sqrt(re_s * re_s + im_s * im_s))
    phase = torch.where(zero, torch.zeros_like(re), torch.atan2(im_s, re_s))
    return SpectralPair(amp, phase)


def ifft_merge(s: SpectralPair, strict: bool = False) -> torch.Tensor:
    """Real part of ``ifft2(amplitude * exp(i * phase))``.

    With ``strict=True`` the discarded imaginary part must stay below 1e-5
    relative to the output scale (true for spectra of real signals).
    """
    amp, phase = s
    if amp.shape != phase.shape:
        raise InvalidInputError(f"amplitude {tuple(amp.shape)} and phase {tuple(phase.shape)} differ")
    z = torch.fft.ifft2(torch.complex(amp * torch.cos(phase), amp * torch.sin(phase)))
    if strict:
        scale = max(1.0, z.real.abs().max().item())
        if z.imag.abs().max().item() >= IMAG_TOL * scale:
            raise InvalidInputError("spectrum is not Hermitian: inverse transform has an imaginary part")
    return z.real


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), SLOPE))


def _conv_act(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(SLOPE)]


class SFPG(nn.Module):
    """Prior generator.

    ``paired=True`` takes ``(x_lq, x_gt)``, concatenates them and space-to-depth
    rearranges by 4 before the shallow encoder. ``paired=False`` is the
    degraded-only variant used as the diffusion condition: three input channels
    and no rearrangement.
    """

    def __init__(self, width, prior_dim, num_prompts=5, paired=True, unshuffle=4, prompt_std=0.02):
        super().__init__()
        self.paired = paired
        self.unshuffle = unshuffle if paired else 1
        cin = (6 if paired else 3) * self.unshuffle ** 2
        self.shallow = nn.Sequential(*_conv_act(cin, width), *_conv_act(width, width))
        self.amp_blocks = nn.Sequential(*(ResBlock(width) for _ in range(3)))
        self.phase_blocks = nn.Sequential(*(ResBlock(width) for _ in range(3)))
        self.post = nn.Sequential(*_conv_act(width, width), *_conv_act(width, width), *_conv_act(width, width))
        self.logit_head = nn.Conv2d(width, num_prompts, 1)
        self.prompts = nn.Parameter(torch.randn(num_prompts, prior_dim) * prompt_std)

    def encode(self, x):
        if self.unshuffle > 1:
            x = pixel_unshuffle(x, self.unshuffle)
        return self.shallow(x)

    def logits(self, xs):
        amp, phase = fft_split(xs)
        xf = ifft_merge(SpectralPair(self.amp_blocks(amp), self.phase_blocks(phase)))
        return self.logit_head(self.post(xf)).mean(dim=(2, 3))

    def mix(self, logits):
        s = torch.softmax(logits, dim=-1)
        return s @ self.prompts, s

    def forward(self, x_lq, x_gt=None, return_weights=False):
        if not torch.isfinite(x_lq).all():
            raise InvalidInputError("non-finite input image")
        if self.paired:
            if x_gt is None or x_gt.shape != x_lq.shape:
                raise InvalidInputError("paired prior generator needs x_lq and x_gt of the same size")
            x = torch.cat([x_lq, x_gt], dim=1)
        else:
            x = x_lq
        z, s = self.mix(self.logits(self.encode(x)))
        return (z, s) if return_weights else z

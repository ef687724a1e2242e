"""Training objectives.

All reductions are means. ``|x|`` uses torch's subgradient 0 at 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import torch

from .core import InvalidInputError


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def grad_loss(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """Mean |dx e| + mean |dy e| of ``e = d1 - d2`` by forward differences.

    Each axis is averaged over the positions where its difference exists,
    so a ramp of slope ``s`` along x scores exactly ``s``.
    """
    _same_shape(d1, d2)
    e = d1 - d2
    gx = e[..., :, 1:] - e[..., :, :-1]
    gy = e[..., 1:, :] - e[..., :-1, :]
    zero = e.new_zeros(())
    return (gx.abs().mean() if gx.numel() else zero) + (gy.abs().mean() if gy.numel() else zero)


def depth_loss(d_pseudo, d_hq, lambda2: float = 0.5):
    return l1_loss(d_pseudo, d_hq) + lambda2 * grad_loss(d_pseudo, d_hq)


@dataclass
class LossReport:
    """Weighted loss total with its named parts.

    ``terms`` keeps the differentiable tensors, ``components`` their float
    values; ``total == sum(weights[k] * components[k])``.
    """

    total: torch.Tensor
    terms: Dict[str, torch.Tensor]
    weights: Dict[str, float]
    components: Dict[str, float] = field(init=False)

    def __post_init__(self):
        self.components = {k: float(v.detach()) for k, v in self.terms.items()}

    def recompute(self) -> float:
        return sum(self.weights[k] * v for k, v in self.components.items())

    def as_row(self) -> Dict[str, float]:
        return {"total": float(self.total.detach()), **self.components}


def stage1_losses(x_hq, x_gt, d_pseudo, d_hq, lambda1=0.1, lambda2=0.5) -> LossReport:
    """``L1(x_gt, x_hq) + lambda1 * (L1(depths) + lambda2 * grad_loss(depths))``."""
    l1 = l1_loss(x_gt, x_hq)
    dl1 = l1_loss(d_pseudo, d_hq)
    dgrad = grad_loss(d_pseudo, d_hq)
    total = l1 + lambda1 * (dl1 + lambda2 * dgrad)
    terms = {"l1": l1, "depth_l1": dl1, "depth_grad": dgrad}
    weights = {"l1": 1.0, "depth_l1": lambda1, "depth_grad": lambda1 * lambda2}
    return LossReport(total, terms, weights)


def stage2_losses(x_hq, x_gt, z, z_hat, eps_pred: Optional[torch.Tensor] = None,
                  eps_true: Optional[torch.Tensor] = None, eps_weight: float = 1.0) -> LossReport:
    """``L1(x_gt, x_hq) + L1(z, z_hat)``, plus an optional noise-matching term."""
    l1 = l1_loss(x_gt, x_hq)
    diff = l1_loss(z, z_hat)
    total = l1 + diff
    terms = {"l1": l1, "diff": diff}
    weights = {"l1": 1.0, "diff": 1.0}
    if eps_pred is not None:
        eps = l1_loss(eps_pred, eps_true)
        total = total + eps_weight * eps
        terms["eps"] = eps
        weights["eps"] = eps_weight
    return LossReport(total, terms, weights)

"""Variational training objective: BCE + Dice reconstruction, KL-weighted total."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import torch
from torch import Tensor

from .distributions import GaussianDiag, kl_diag

PROB_EPS = 1e-7  # clipping bound for the BCE logs
DICE_EPS = 1e-6  # smoothing term in the Dice ratio

# Gradient-corruption hook for the Dice term, used as a negative control by the
# finite-difference gradient check. 1.0 means untouched.
_dice_grad_scale = 1.0


class _ScaleGrad(torch.autograd.Function):
    """Identity in the forward pass, scales the gradient in the backward pass."""

    @staticmethod
    def forward(ctx, x: Tensor, scale: float) -> Tensor:
        ctx.scale = scale
        return x.clone()

    @staticmethod
    def backward(ctx, grad: Tensor):
        return grad * ctx.scale, None


@contextmanager
def corrupt_dice_grad(scale: float) -> Iterator[None]:
    """Scale the analytic gradient of the Dice term inside total_loss.

    Test hook only: lets the gradient checker prove it catches a wrong gradient.
    """
    global _dice_grad_scale
    prev = _dice_grad_scale
    _dice_grad_scale = float(scale)
    try:
        yield
    finally:
        _dice_grad_scale = prev


@dataclass
class LossBreakdown:
    """recon = bce + dice and total = recon + beta * kl hold by construction.

    Fields are 0-dim tensors; `total` carries the autograd graph during training.
    """

    bce: Tensor
    dice: Tensor
    recon: Tensor
    kl: Tensor
    total: Tensor
    beta: float

    def as_floats(self) -> dict[str, float]:
        return {
            "bce": float(self.bce.detach()),
            "dice": float(self.dice.detach()),
            "recon": float(self.recon.detach()),
            "kl": float(self.kl.detach()),
            "total": float(self.total.detach()),
            "beta": self.beta,
        }


def _check_shapes(y: Tensor, yhat: Tensor) -> None:
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs yhat {tuple(yhat.shape)}")


def bce_loss(y: Tensor, yhat: Tensor) -> Tensor:
    """Mean binary cross-entropy, -1/N sum[y log yhat + (1-y) log(1-yhat)].

    Probabilities are clipped to [PROB_EPS, 1 - PROB_EPS] before the logs.
    """
    _check_shapes(y, yhat)
    yhat = yhat.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(y * torch.log(yhat) + (1.0 - y) * torch.log(1.0 - yhat)).mean()


def dice_loss(y: Tensor, yhat: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(y*yhat) + eps) / (sum(y) + sum(yhat) + eps), over the whole mask."""
    _check_shapes(y, yhat)
    inter = (y * yhat).sum()
    return 1.0 - (2.0 * inter + eps) / (y.sum() + yhat.sum() + eps)


def _dice_loss_per_sample(y: Tensor, yhat: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Per-sample Dice loss over a [B, ...] batch; sums run within each sample."""
    yf = y.flatten(1)
    pf = yhat.flatten(1)
    inter = (yf * pf).sum(dim=1)
    return 1.0 - (2.0 * inter + eps) / (yf.sum(dim=1) + pf.sum(dim=1) + eps)


def total_loss(
    y: Tensor,
    logits: Tensor,
    q: GaussianDiag,
    p: GaussianDiag,
    beta: float,
) -> LossBreakdown:
    """Full objective: sigmoid(logits) against y with BCE + Dice, plus beta * KL(q || p).

    `y`/`logits` are a single (H, W) mask or a (B, H, W) batch; batched inputs are
    averaged per sample (Dice and KL are computed within each sample first).
    """
    _check_shapes(y, logits)
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    yhat = torch.sigmoid(logits)
    bce = bce_loss(y, yhat)
    if logits.ndim == 3:
        dice = _dice_loss_per_sample(y, yhat).mean()
    else:
        dice = dice_loss(y, yhat)
    if _dice_grad_scale != 1.0:
        dice = _ScaleGrad.apply(dice, _dice_grad_scale)
    kl = kl_diag(q, p)
    if kl.ndim > 0:
        kl = kl.mean()
    recon = bce + dice
    total = recon + beta * kl
    return LossBreakdown(bce=bce, dice=dice, recon=recon, kl=kl, total=total, beta=float(beta))

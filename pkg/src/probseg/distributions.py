"""Diagonal Gaussian latent algebra: reparameterized sampling and closed-form KL."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass
class GaussianDiag:
    """N(mu, diag(exp(log_var))). The trailing dim is the latent dim; any leading
    dims are batch dims. Variance is carried as log-variance so optimization over
    the parameters is unconstrained."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.log_var.shape:
            raise ValueError(
                f"mu shape {tuple(self.mu.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )
        if self.mu.ndim < 1 or self.mu.shape[-1] < 1:
            raise ValueError("latent dimension must be >= 1")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_var)


def sample_reparam(q: GaussianDiag, noise: Tensor) -> Tensor:
    """z = mu + exp(log_var / 2) * noise.

    Pure function of (q, noise); gradients flow into mu and log_var.
    """
    if noise.shape != q.mu.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != mu shape {tuple(q.mu.shape)}"
        )
    return q.mu + torch.exp(0.5 * q.log_var) * noise


def kl_diag(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the latent dim.

        0.5 * sum_i [ (var_q_i + (mu_q_i - mu_p_i)^2) / var_p_i
                      - 1 + log_var_p_i - log_var_q_i ]

    Returns a tensor with the batch shape of the inputs (0-dim for plain vectors).
    Nonnegative up to float tolerance, exactly 0 iff q == p.
    """
    if q.mu.shape != p.mu.shape:
        raise ValueError(
            f"latent shapes differ: {tuple(q.mu.shape)} vs {tuple(p.mu.shape)}"
        )
    for name, t in (
        ("q.mu", q.mu),
        ("q.log_var", q.log_var),
        ("p.mu", p.mu),
        ("p.log_var", p.log_var),
    ):
        if not bool(torch.isfinite(t).all()):
            raise ValueError(f"non-finite values in {name}")
    var_q = torch.exp(q.log_var)
    var_p = torch.exp(p.log_var)
    per_dim = (var_q + (q.mu - p.mu) ** 2) / var_p - 1.0 + p.log_var - q.log_var
    return 0.5 * per_dim.sum(dim=-1)

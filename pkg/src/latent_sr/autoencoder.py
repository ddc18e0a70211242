"""Differential-prior encoder and latent regularizers (KL and vector quantization)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .layers import Downsample, ResBlock, group_norm

LOG_VAR_MIN, LOG_VAR_MAX = -30.0, 20.0


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} vs log_var {tuple(self.log_var.shape)}")


class DPEncoder(nn.Module):
    """Residual encoder reducing spatial size by 8.

    ``in_channels=6`` consumes ``HR (+) upsampled LR``; the conditioning network
    reuses the same layout with ``in_channels=3``.
    """

    def __init__(
        self,
        in_channels: int = 6,
        out_channels: int = 8,
        base_channels: int = 64,
        channel_mults=(1, 2, 2, 4),
        blocks_per_group: int = 2,
    ):
        super().__init__()
        self.out_channels = out_channels
        self.conv_in = nn.Conv2d(in_channels, base_channels, 3, padding=1)
        layers = []
        ch = base_channels
        for i, mult in enumerate(channel_mults):
            out = base_channels * mult
            for _ in range(blocks_per_group):
                layers.append(ResBlock(ch, out))
                ch = out
            if i < len(channel_mults) - 1:
                layers.append(Downsample(ch))
        self.body = nn.Sequential(*layers)
        self.norm_out = group_norm(ch)
        self.conv_out = nn.Conv2d(ch, out_channels, 3, padding=1)
        self.downsample_factor = 2 ** (len(channel_mults) - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.downsample_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ShapeError(f"input dims {tuple(x.shape[-2:])} not divisible by {f}")
        h = self.body(self.conv_in(x))
        return self.conv_out(F.silu(self.norm_out(h)))


def dp_encode(hr: torch.Tensor, lr_up: torch.Tensor, encoder: DPEncoder) -> LatentDistribution:
    """Encode the HR / upsampled-LR pair into a diagonal Gaussian over the latent."""
    if hr.shape != lr_up.shape:
        raise ShapeError(f"hr {tuple(hr.shape)} and lr_up {tuple(lr_up.shape)} differ")
    moments = encoder(torch.cat([hr, lr_up], dim=1))
    mu, log_var = moments.chunk(2, dim=1)
    return LatentDistribution(mu, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))


def reparameterize(dist: LatentDistribution, generator: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    if eps is None:
        eps = torch.randn(dist.mu.shape, generator=generator, dtype=dist.mu.dtype)
    log_var = dist.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    return dist.mu + torch.exp(0.5 * log_var) * eps


def kl_divergence(dist: LatentDistribution) -> torch.Tensor:
    """Mean elementwise KL from ``N(mu, exp(log_var))`` to ``N(0, 1)``."""
    mu, log_var = dist.mu, dist.log_var
    return 0.5 * torch.mean(mu.pow(2) + torch.exp(log_var) - 1.0 - log_var)


def vq_quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Nearest-codeword quantization of a ``(N, C, h, w)`` latent.

    Returns ``(z_q, commitment, indices)``. ``z_q`` carries straight-through
    gradients to ``z``. ``commitment`` is the squared L2 distance between each
    spatial vector and its codeword, averaged over vectors, with the codeword
    treated as constant. Ties resolve to the lowest codebook index.
    """
    if codebook.ndim != 2 or codebook.shape[1] != z.shape[1]:
        raise ShapeError(f"codebook {tuple(codebook.shape)} incompatible with latent channels {z.shape[1]}")
    n, c, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, c)
    dist = (flat[:, None, :].detach() - codebook[None].detach()).pow(2).sum(-1)
    indices = torch.argmin(dist, dim=1)
    q = codebook[indices].reshape(n, h, w, c).permute(0, 3, 1, 2)
    commitment = (z - q.detach()).pow(2).sum(1).mean()
    z_q = z + (q - z).detach()
    return z_q, commitment, indices.reshape(n, h, w)


class VectorQuantizer(nn.Module):
    """Learned codebook; the regularizer is codebook loss + weighted commitment."""

    def __init__(self, num_codes: int = 512, dim: int = 4, commitment_weight: float = 0.25):
        super().__init__()
        if num_codes < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.embedding = nn.Parameter(torch.empty(num_codes, dim).uniform_(-1.0 / num_codes, 1.0 / num_codes))
        self.commitment_weight = commitment_weight

    def forward(self, z: torch.Tensor):
        z_q, commitment, indices = vq_quantize(z, self.embedding)
        q = self.embedding[indices].permute(0, 3, 1, 2)
        codebook_loss = (z.detach() - q).pow(2).sum(1).mean()
        return z_q, codebook_loss + self.commitment_weight * commitment, indices

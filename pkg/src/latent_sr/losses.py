"""Stage-1 (reconstruction + adversarial + regularization) and stage-2 (latent) losses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .layers import group_norm

RECEPTIVE_FIELD = 70


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


class PatchDiscriminator(nn.Module):
    """Strided-conv patch classifier producing a map of real/fake logits.

    The full stack (four conv layers 64..512 wide, strides 2,2,2,1, then a
    1-channel head) sees 70x70 patches. ``n_layers=3`` drops one stride-2
    stage for crops smaller than that.
    """

    def __init__(self, in_channels=3, base_channels=64, n_layers=4):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base_channels, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = base_channels
        for i in range(1, n_layers):
            out = base_channels * min(2 ** i, 8)
            stride = 2 if i < n_layers - 1 else 1
            layers += [nn.Conv2d(ch, out, 4, stride=stride, padding=1), group_norm(out), nn.LeakyReLU(0.2)]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        self.n_layers = n_layers

    def forward(self, x):
        return self.net(x)


def discriminator_layers(image_size: int, requested: int = 4) -> int:
    """Number of conv layers to use for crops of ``image_size`` pixels."""
    if image_size < RECEPTIVE_FIELD and requested > 3:
        warnings.warn(
            f"{image_size}px crops are smaller than the {RECEPTIVE_FIELD}px patch; using a 3-layer discriminator",
            stacklevel=2,
        )
        return 3
    return requested


def hinge_d_loss(logits_real, logits_fake):
    return torch.mean(F.relu(1.0 - logits_real)) + torch.mean(F.relu(1.0 + logits_fake))


def generator_adv_loss(logits_fake):
    return -torch.mean(logits_fake)


def adversarial_losses(real, fake, disc: nn.Module):
    """Return ``(generator loss, discriminator loss)`` under the hinge objective."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    logits_fake = disc(fake)
    d_loss = hinge_d_loss(disc(real), logits_fake)
    return generator_adv_loss(logits_fake), d_loss


@dataclass
class Stage1LossReport:
    l1: torch.Tensor
    adv_gen: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    disc_loss: torch.Tensor | None = None

    def scalars(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("l1", "adv_gen", "reg", "total")}
        if self.disc_loss is not None:
            out["disc_loss"] = float(self.disc_loss.detach())
        return out


def stage1_loss(hr, hr_hat, reg_value, logits_fake, w1=1e-6, w2=0.5, warmup=False) -> Stage1LossReport:
    """Reconstruction L1 plus weighted adversarial and regularization terms.

    During warmup only the L1 term enters ``total``; the others are still reported.
    ``logits_fake`` may be ``None`` to skip the adversarial term.
    """
    l1 = l1_loss(hr_hat, hr)
    adv = generator_adv_loss(logits_fake) if logits_fake is not None else torch.zeros((), dtype=l1.dtype)
    reg = torch.as_tensor(reg_value, dtype=l1.dtype)
    total = l1 if warmup else l1 + w1 * adv + w2 * reg
    return Stage1LossReport(l1=l1, adv_gen=adv, reg=reg, total=total)


@dataclass
class Stage2LossReport:
    diffusion: torch.Tensor
    kd: torch.Tensor
    total: torch.Tensor

    def scalars(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("diffusion", "kd", "total")}


def stage2_loss(z0_hat, z0, c, use_diffusion=True, use_kd=True) -> Stage2LossReport:
    if not (z0_hat.shape == z0.shape == c.shape):
        raise ShapeError(
            f"stage-2 shapes differ: z0_hat {tuple(z0_hat.shape)}, z0 {tuple(z0.shape)}, c {tuple(c.shape)}"
        )
    diffusion = l1_loss(z0_hat, z0)
    kd = l1_loss(c, z0)
    total = (diffusion if use_diffusion else 0.0) + (kd if use_kd else 0.0)
    return Stage2LossReport(diffusion=diffusion, kd=kd, total=torch.as_tensor(total))

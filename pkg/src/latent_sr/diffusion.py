"""Few-step conditional diffusion over the differential-prior latent."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import DPEncoder
from .errors import ScheduleError, ShapeError
from .layers import Downsample, ResBlock, Upsample, group_norm


@dataclass(frozen=True)
class VarianceSchedule:
    """Tables indexed by step ``t`` in ``1..T`` (stored 0-based)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside 1..{self.T}")
        return t - 1

    def beta(self, t):
        return float(self.betas[self._check(t)])

    def alpha(self, t):
        return float(self.alphas[self._check(t)])

    def alpha_bar(self, t):
        return float(self.alpha_bars[self._check(t)])


def build_schedule(T: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    """Linear beta schedule from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    for b in (beta_start, beta_end):
        if not 0.0 < b < 1.0:
            raise ScheduleError(f"beta values must lie in (0, 1), got {b}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return VarianceSchedule(T, betas, alphas, alpha_bars)


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: VarianceSchedule) -> torch.Tensor:
    if eps.shape != z0.shape:
        raise ShapeError(f"noise {tuple(eps.shape)} vs latent {tuple(z0.shape)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def reverse_step(z_t, t: int, eps_hat, sched: VarianceSchedule, noise=None):
    """One reverse update; ``noise=None`` gives the deterministic (training) variant."""
    alpha, ab = sched.alpha(t), sched.alpha_bar(t)
    out = (z_t - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if noise is not None:
        out = out + math.sqrt(sched.beta(t)) * noise
    return out


def sinusoidal_embed(v, d: int) -> torch.Tensor:
    """Transformer-style sin/cos bank; ``v`` scalar or ``(N,)`` -> ``(N, d)``.

    Frequencies run geometrically from 1 down to 1/10000.
    """
    if d % 2:
        raise ValueError(f"embedding dim must be even, got {d}")
    v = torch.as_tensor(v, dtype=torch.float64).reshape(-1, 1)
    half = d // 2
    if half > 1:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    else:
        freqs = torch.ones(1, dtype=torch.float64)
    args = v * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def scale_embedding_input(s):
    return torch.as_tensor(s, dtype=torch.float64) * 1000.0 / 8.0


class CondNet(DPEncoder):
    """Encoder-shaped conditioning network on the upsampled LR image."""

    def __init__(self, latent_channels=4, base_channels=64, channel_mults=(1, 2, 2, 4)):
        super().__init__(3, latent_channels, base_channels, channel_mults)


def cond_encode(lr_up: torch.Tensor, cond_net: CondNet) -> torch.Tensor:
    return cond_net(lr_up)


class SelfAttention(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm = group_norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Noise predictor: a small UNet on ``concat(z_t, c)``.

    Step and scale embeddings are summed and injected into every residual block.
    Inputs are padded to a multiple of ``2**(levels-1)`` and cropped back.
    """

    def __init__(self, latent_channels=4, base_channels=64, channel_mults=(1, 2, 4),
                 blocks_per_level=2, embed_dim=256):
        super().__init__()
        self.embed_dim = embed_dim
        emb_ch = 4 * base_channels
        self.embed = nn.Sequential(nn.Linear(embed_dim, emb_ch), nn.SiLU(), nn.Linear(emb_ch, emb_ch))
        self.conv_in = nn.Conv2d(2 * latent_channels, base_channels, 3, padding=1)
        self.multiple = 2 ** (len(channel_mults) - 1)
        self.calls = 0

        self.down = nn.ModuleList()
        skip_chs = []
        ch = base_channels
        for level, mult in enumerate(channel_mults):
            out = base_channels * mult
            coarsest = level == len(channel_mults) - 1
            for _ in range(blocks_per_level):
                self.down.append(nn.ModuleDict({
                    "res": ResBlock(ch, out, emb_ch),
                    "attn": SelfAttention(out) if coarsest else nn.Identity(),
                }))
                ch = out
                skip_chs.append(ch)
            if not coarsest:
                self.down.append(nn.ModuleDict({"down": Downsample(ch)}))

        self.up = nn.ModuleList()
        for level in reversed(range(len(channel_mults))):
            out = base_channels * channel_mults[level]
            coarsest = level == len(channel_mults) - 1
            for _ in range(blocks_per_level):
                self.up.append(nn.ModuleDict({
                    "res": ResBlock(ch + skip_chs.pop(), out, emb_ch),
                    "attn": SelfAttention(out) if coarsest else nn.Identity(),
                }))
                ch = out
            if level > 0:
                self.up.append(nn.ModuleDict({"up": Upsample(ch)}))

        self.norm_out = group_norm(ch)
        self.conv_out = nn.Conv2d(ch, latent_channels, 3, padding=1)
        self.conv_out.zero_init = True

    def _pad(self, x):
        h, w = x.shape[-2:]
        ph, pw = -h % self.multiple, -w % self.multiple
        pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
        if not any(pad):
            return x, pad
        reflect_ok = max(pad[0], pad[1]) < w and max(pad[2], pad[3]) < h
        return F.pad(x, pad, mode="reflect" if reflect_ok else "replicate"), pad

    def forward(self, z_t, t, s, c):
        if z_t.shape != c.shape:
            raise ShapeError(f"z_t {tuple(z_t.shape)} and condition {tuple(c.shape)} differ")
        self.calls += 1
        n = z_t.shape[0]
        t_emb = sinusoidal_embed(torch.as_tensor(t, dtype=torch.float64).expand(n), self.embed_dim)
        s_emb = sinusoidal_embed(scale_embedding_input(s).expand(n), self.embed_dim)
        emb = self.embed((t_emb + s_emb).to(z_t.dtype))

        x, pad = self._pad(torch.cat([z_t, c], dim=1))
        h = self.conv_in(x)
        skips = []
        for block in self.down:
            if "down" in block:
                h = block["down"](h)
            else:
                h = block["attn"](block["res"](h, emb))
                skips.append(h)
        for block in self.up:
            if "up" in block:
                h = block["up"](h)
            else:
                h = block["attn"](block["res"](torch.cat([h, skips.pop()], dim=1), emb))
        out = self.conv_out(F.silu(self.norm_out(h)))
        hh, ww = out.shape[-2:]
        return out[..., pad[2]:hh - pad[3], pad[0]:ww - pad[1]]


def denoise_predict(z_t, t, s, c, denoiser: Denoiser):
    return denoiser(z_t, t, s, c)


def rollout(z_T, s, c, sched: VarianceSchedule, denoiser: Denoiser,
            stochastic: bool = False, generator: torch.Generator | None = None):
    """Run all reverse steps ``t = T..1``; one denoiser call per step."""
    z = z_T
    for t in range(sched.T, 0, -1):
        noise = None
        if stochastic:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        eps_hat = denoiser(z, t, s, c)
        z = reverse_step(z, t, eps_hat, sched, noise)
    return z

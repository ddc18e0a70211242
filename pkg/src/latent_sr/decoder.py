"""Prior-enhanced SR decoder: prior pyramid, modulated SR branch and continuous upsampler."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import resize_tensor
from .errors import ShapeError
from .layers import ResBlock, Upsample, group_norm

NORM_EPS = 1e-8


def _scale_tensor(s, batch: int, dtype) -> torch.Tensor:
    s = torch.as_tensor(s, dtype=dtype)
    if s.ndim == 0:
        s = s.expand(batch)
    if torch.any(s < 1.0):
        raise ValueError(f"scale factor must be >= 1, got {s.min().item()}")
    return s.reshape(-1, 1)


def make_coord(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Pixel-center coordinates in ``[-1, 1]``, shape ``(height*width, 2)`` as ``(x, y)``, row-major."""
    ys = -1 + (2 * torch.arange(height, dtype=dtype) + 1) / height
    xs = -1 + (2 * torch.arange(width, dtype=dtype) + 1) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(-1, 2)


class DPDecoder(nn.Module):
    """Decodes a latent into four feature maps, finest first.

    ``h4`` lives at the latent resolution; each following level is produced by a
    x2 upsample and a residual group.
    """

    def __init__(self, latent_channels=4, channels=64, levels=4, blocks_per_group=2):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels, channels, 3, padding=1)
        self.groups = nn.ModuleList(
            nn.Sequential(*[ResBlock(channels, channels) for _ in range(blocks_per_group)])
            for _ in range(levels)
        )
        self.ups = nn.ModuleList(Upsample(channels) for _ in range(levels - 1))

    def forward(self, z: torch.Tensor) -> list[torch.Tensor]:
        h = self.groups[0](self.conv_in(z))
        pyramid = [h]
        for up, group in zip(self.ups, self.groups[1:]):
            h = group(up(h))
            pyramid.append(h)
        return pyramid[::-1]


def normalize_pairs(raw: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """``|a_j| / sqrt(a_1^2 + a_2^2 + eps)`` over the last axis (size 2)."""
    return raw.abs() / torch.sqrt(raw.pow(2).sum(-1, keepdim=True) + eps)


class ScaleModulation(nn.Module):
    """MLP mapping the scale factor to L2-normalized blending pairs, one per FRU."""

    def __init__(self, n_pairs=4, hidden=64):
        super().__init__()
        self.n_pairs = n_pairs
        self.mlp = nn.Sequential(
            nn.Linear(1, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, 2 * n_pairs),
        )

    def raw(self, s, batch=1, dtype=torch.float32):
        s = _scale_tensor(s, batch, dtype)
        return self.mlp(s / 8.0).reshape(-1, self.n_pairs, 2)

    def forward(self, s, batch=1, dtype=torch.float32) -> torch.Tensor:
        return normalize_pairs(self.raw(s, batch, dtype))


def modulate_features(f_prev, prior, coeffs, conv):
    """Blend SR features with a resized, projected prior map.

    ``coeffs`` is ``(N, 2)``: weight on ``f_prev`` then weight on the prior path.
    """
    projected = conv(resize_tensor(prior, f_prev.shape[-2:]))
    if projected.shape != f_prev.shape:
        raise ShapeError(f"prior projection {tuple(projected.shape)} vs features {tuple(f_prev.shape)}")
    a1 = coeffs[:, 0].reshape(-1, 1, 1, 1)
    a2 = coeffs[:, 1].reshape(-1, 1, 1, 1)
    return a1 * f_prev + a2 * projected


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(2, channels // reduction)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, channels, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.gate(x)


class IMDB(nn.Module):
    """Information multi-distillation block.

    Three conv/split steps each keep a quarter of the channels; the remainder
    feeds the next conv. The kept slices plus a final conv are concatenated,
    compressed by 1x1 conv, gated by channel attention and added to the input.
    """

    def __init__(self, channels=64):
        super().__init__()
        if channels % 4:
            raise ValueError(f"IMDB needs channels divisible by 4, got {channels}")
        self.distilled = channels // 4
        self.remaining = channels - self.distilled
        self.c1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.c2 = nn.Conv2d(self.remaining, channels, 3, padding=1)
        self.c3 = nn.Conv2d(self.remaining, channels, 3, padding=1)
        self.c4 = nn.Conv2d(self.remaining, self.distilled, 3, padding=1)
        self.fuse = nn.Conv2d(self.distilled * 4, channels, 1)
        self.attention = ChannelAttention(channels)

    def forward(self, x):
        kept = []
        h = x
        for conv in (self.c1, self.c2, self.c3):
            h = F.leaky_relu(conv(h), 0.05)
            d, h = torch.split(h, [self.distilled, self.remaining], dim=1)
            kept.append(d)
        kept.append(self.c4(h))
        return x + self.attention(self.fuse(torch.cat(kept, dim=1)))


class FRU(nn.Module):
    """Stacked IMDBs whose outputs are concatenated, 1x1-compressed and added to the input."""

    def __init__(self, channels=64, n_imdb=4):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleList(IMDB(channels) for _ in range(n_imdb))
        self.compress = nn.Conv2d(channels * n_imdb, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"FRU expects {self.channels} channels, got {x.shape[1]}")
        outs = []
        h = x
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return x + self.compress(torch.cat(outs, dim=1))


class CSUM(nn.Module):
    """Implicit continuous-scale upsampler over a pixel-shuffle feature pyramid."""

    def __init__(self, in_channels=64, feat_channels=32, ratios=(1, 2, 3, 4),
                 hidden=256, n_layers=5, fusion_hidden=64):
        super().__init__()
        self.ratios = tuple(ratios)
        self.expand = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_channels, feat_channels * r * r, 3, padding=1), nn.PixelShuffle(r))
            for r in self.ratios
        )
        self.fusion = nn.Sequential(
            nn.Linear(1, fusion_hidden), nn.ReLU(), nn.Linear(fusion_hidden, len(self.ratios))
        )
        layers = []
        dim = feat_channels + 3
        for _ in range(n_layers - 1):
            layers += [nn.Linear(dim, hidden), nn.ReLU()]
            dim = hidden
        layers.append(nn.Linear(dim, 3))
        self.mlp = nn.Sequential(*layers)

    def feature_maps(self, features):
        return [expand(features) for expand in self.expand]

    def fusion_weights(self, s, batch, dtype):
        s = _scale_tensor(s, batch, dtype)
        return torch.softmax(self.fusion(s / 8.0), dim=-1)

    def sample_maps(self, maps, coords):
        """Bilinear samples of each map at ``coords`` ``(N, Q, 2)``: list of ``(N, Q, C)``."""
        grid = coords.unsqueeze(1)
        return [
            F.grid_sample(m, grid, mode="bilinear", padding_mode="border", align_corners=False)[:, :, 0].transpose(1, 2)
            for m in maps
        ]

    def forward(self, features, s, coords, fusion_weights=None, chunk: int | None = None):
        n, _, h, w = features.shape
        if coords.ndim == 2:
            coords = coords.unsqueeze(0).expand(n, -1, -1)
        if coords.numel() and (coords.abs().max() > 1.0):
            raise ValueError("query coordinates must lie in [-1, 1]")
        s_t = _scale_tensor(s, n, features.dtype)
        if fusion_weights is None:
            fusion_weights = self.fusion_weights(s_t, n, features.dtype)
        maps = self.feature_maps(features)
        fine_h, fine_w = maps[-1].shape[-2:]
        size = torch.tensor([fine_w, fine_h], dtype=features.dtype)
        outs = []
        step = chunk or coords.shape[1]
        for start in range(0, coords.shape[1], step):
            c = coords[:, start:start + step]
            samples = self.sample_maps(maps, c)
            y = sum(fusion_weights[:, t, None, None] * samples[t] for t in range(len(samples)))
            cell = torch.clamp(torch.floor((c + 1) / 2 * size), max=size - 1)
            center = -1 + (2 * cell + 1) / size
            offset = (c - center) * size / 2
            inv_s = (1.0 / s_t).unsqueeze(1).expand(-1, c.shape[1], 1)
            outs.append(self.mlp(torch.cat([y, offset, inv_s], dim=-1)))
        return torch.cat(outs, dim=1)


@dataclass
class DecoderConfig:
    latent_channels: int = 4
    prior_channels: int = 64
    sr_channels: int = 64
    n_fru: int = 4
    imdb_per_fru: int = 4
    csum_channels: int = 32
    csum_ratios: tuple = (1, 2, 3, 4)
    csum_hidden: int = 256
    modulation_hidden: int = 64
    disable_modulation: bool = False
    disable_sr_branch: bool = False
    disable_prior_connections: bool = False


class DPESR(nn.Module):
    """Maps ``(LR image, latent, scale)`` to the SR image.

    Ablation switches change the wiring structurally:

    * ``disable_prior_connections``: no prior decoder; SR branch only.
    * ``disable_sr_branch``: no shallow conv or FRUs; features come from the prior path only.
    * ``disable_modulation``: prior features are concatenated and 1x1-fused instead of
      blended with scale-dependent coefficients.
    """

    def __init__(self, cfg: DecoderConfig | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        ch = cfg.sr_channels
        self.use_prior = not cfg.disable_prior_connections
        self.use_sr = not cfg.disable_sr_branch
        if not (self.use_prior or self.use_sr):
            raise ValueError("cannot disable both the prior connections and the SR branch")
        if self.use_prior:
            self.prior_decoder = DPDecoder(cfg.latent_channels, cfg.prior_channels, levels=cfg.n_fru)
            self.prior_convs = nn.ModuleList(
                nn.Conv2d(cfg.prior_channels, ch, 3, padding=1) for _ in range(cfg.n_fru)
            )
            if cfg.disable_modulation:
                self.concat_fuse = nn.ModuleList(nn.Conv2d(2 * ch, ch, 1) for _ in range(cfg.n_fru))
            else:
                self.modulation = ScaleModulation(cfg.n_fru, cfg.modulation_hidden)
        if self.use_sr:
            self.shallow = nn.Conv2d(3, ch, 3, padding=1)
            self.frus = nn.ModuleList(FRU(ch, cfg.imdb_per_fru) for _ in range(cfg.n_fru))
        self.csum = CSUM(ch, cfg.csum_channels, cfg.csum_ratios, cfg.csum_hidden)
        self.calls = 0

    @property
    def modulated(self) -> bool:
        return self.use_prior and not self.cfg.disable_modulation

    def features(self, lr, z, s, coeffs=None):
        n = lr.shape[0]
        pyramid = self.prior_decoder(z) if self.use_prior else None
        if self.modulated:
            if coeffs is None:
                coeffs = self.modulation(s, n, lr.dtype)
            coeffs = torch.as_tensor(coeffs, dtype=lr.dtype)
            if coeffs.ndim == 2:
                coeffs = coeffs.unsqueeze(0).expand(n, -1, -1)
        if self.use_sr:
            shallow = self.shallow(lr)
            f = shallow
        else:
            f = lr.new_zeros(n, self.cfg.sr_channels, *lr.shape[-2:])
        for i in range(self.cfg.n_fru):
            if self.use_prior:
                if self.modulated:
                    f = modulate_features(f, pyramid[i], coeffs[:, i], self.prior_convs[i])
                else:
                    prior = self.prior_convs[i](resize_tensor(pyramid[i], f.shape[-2:]))
                    f = self.concat_fuse[i](torch.cat([f, prior], dim=1))
            if self.use_sr:
                f = self.frus[i](f)
        if self.use_sr:
            f = f + shallow
        return f

    def forward(self, lr, z, s, coeffs=None, clip=True, chunk=None):
        """SR image ``(N, 3, 8*z_h, 8*z_w)``; ``clip=False`` keeps the raw output for training losses."""
        lr_h, lr_w = lr.shape[-2:]
        out_h, out_w = 8 * z.shape[-2], 8 * z.shape[-1]
        for out_dim, lr_dim in ((out_h, lr_h), (out_w, lr_w)):
            if abs(out_dim - float(s) * lr_dim) >= 8 or out_dim + 8 <= lr_dim:
                raise ShapeError(
                    f"latent {tuple(z.shape[-2:])} inconsistent with lr {(lr_h, lr_w)} at scale {float(s):.4f}"
                )
        if z.shape[0] != lr.shape[0]:
            raise ShapeError("lr and z batch sizes differ")
        self.calls += 1
        f = self.features(lr, z, s, coeffs)
        coords = make_coord(out_h, out_w, lr.dtype)
        rgb = self.csum(f, s, coords, chunk=chunk)
        img = rgb.transpose(1, 2).reshape(lr.shape[0], 3, out_h, out_w)
        return img.clamp(0.0, 1.0) if clip else img

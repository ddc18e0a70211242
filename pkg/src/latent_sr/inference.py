"""End-to-end sampling and PSNR evaluation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import CheckpointManifest, load_checkpoint
from .data import bicubic_resize, check_image, hr_size, to_image, to_tensor
from .diffusion import build_schedule, rollout
from .errors import CheckpointError, ShapeError
from .training import LatentSR, model_from_manifest

PSNR_CAP = 100.0


@dataclass
class InferenceRequest:
    lr: np.ndarray
    scale: float
    seed: int = 0
    checkpoint: str | None = None

    @property
    def output_size(self) -> tuple[int, int]:
        return hr_size(self.lr.shape[0], self.scale), hr_size(self.lr.shape[1], self.scale)


class SuperResolver:
    """Loaded stage-2 model; :meth:`__call__` is safe to reuse across requests."""

    def __init__(self, model: LatentSR, cfg, chunk: int = 65536):
        if model.denoiser is None or model.cond_net is None:
            raise CheckpointError("model has no diffusion networks; a stage-2 checkpoint is required")
        self.model = model.eval()
        self.cfg = cfg
        self.sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.chunk = chunk

    @classmethod
    def from_manifest(cls, manifest: CheckpointManifest, **kw) -> "SuperResolver":
        if manifest.stage < 2:
            missing = [n for n in ("cond_net", "denoiser") if not manifest.names(n + ".")]
            raise CheckpointError(
                f"stage-{manifest.stage} checkpoint cannot be used for inference; missing tensors for: "
                + ", ".join(missing)
            )
        model, cfg = model_from_manifest(manifest, require_stage=2)
        return cls(model, cfg, **kw)

    @classmethod
    def from_file(cls, path, **kw) -> "SuperResolver":
        return cls.from_manifest(load_checkpoint(path), **kw)

    @torch.no_grad()
    def __call__(self, lr: np.ndarray, scale: float, seed: int = 0) -> np.ndarray:
        check_image(lr, "lr")
        if not 1.0 <= scale <= 8.0:
            warnings.warn(f"scale {scale} outside the trained range [1, 8]; extrapolating", stacklevel=2)
        out_h, out_w = hr_size(lr.shape[0], scale), hr_size(lr.shape[1], scale)
        if out_h < 8 or out_w < 8:
            raise ShapeError(f"scale {scale} on {lr.shape[:2]} yields an empty output")
        s_eff = max(out_h / lr.shape[0], 1.0)
        dtype = next(self.model.parameters()).dtype
        lr_t = to_tensor(lr, dtype)
        lr_up = to_tensor(bicubic_resize(lr, (out_h, out_w)), dtype)
        c = self.model.cond_net(lr_up)
        gen = torch.Generator().manual_seed(int(seed))
        z_T = torch.randn(c.shape, generator=gen, dtype=dtype)
        z0 = rollout(z_T, s_eff, c, self.sched, self.model.denoiser, stochastic=True, generator=gen)
        sr = self.model.decoder(lr_t, z0, s_eff, clip=True, chunk=self.chunk)
        return to_image(sr)


def infer(req: InferenceRequest, resolver: SuperResolver | None = None) -> np.ndarray:
    if resolver is None:
        if req.checkpoint is None:
            raise CheckpointError("no checkpoint given")
        resolver = SuperResolver.from_file(req.checkpoint)
    return resolver(req.lr, req.scale, req.seed)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """RGB PSNR in dB for images in [0, 1], no luma conversion or border crop; capped at 100."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"psnr shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))

"""Stage-1 autoencoder training and stage-2 full-rollout diffusion training."""
from __future__ import annotations

import hashlib
import logging
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .autoencoder import DPEncoder, VectorQuantizer, dp_encode, kl_divergence, reparameterize
from .checkpoint import CheckpointManifest, apply_arrays, state_to_arrays
from .config import TrainConfig
from .data import collate, hr_size, sample_batch
from .decoder import DPESR
from .diffusion import CondNet, Denoiser, build_schedule, q_sample, rollout
from .errors import CheckpointError, NumericalError
from .layers import init_weights
from .losses import (
    PatchDiscriminator,
    Stage1LossReport,
    Stage2LossReport,
    discriminator_layers,
    hinge_d_loss,
    l1_loss,
    stage1_loss,
    stage2_loss,
)

log = logging.getLogger(__name__)

STAGE1_PARTS = ("encoder", "decoder", "quantizer")
STAGE2_PARTS = ("cond_net", "denoiser")


class LatentSR(nn.Module):
    """Container for every network; submodule names double as checkpoint prefixes."""

    def __init__(self, cfg: TrainConfig, with_diffusion: bool = True):
        super().__init__()
        m = cfg.model
        self.reg_mode = cfg.reg_mode
        enc_out = 2 * m.latent_channels if cfg.reg_mode == "kl" else m.latent_channels
        self.encoder = DPEncoder(6, enc_out, m.enc_channels, tuple(m.enc_mults))
        self.decoder = DPESR(cfg.decoder_config())
        self.quantizer = (
            VectorQuantizer(m.codebook_size, m.latent_channels, m.commitment_weight) if cfg.reg_mode == "vq" else None
        )
        self.discriminator = PatchDiscriminator(3, m.disc_channels, m.disc_layers)
        if with_diffusion:
            self.cond_net = CondNet(m.latent_channels, m.cond_channels, tuple(m.enc_mults))
            self.denoiser = Denoiser(m.latent_channels, m.unet_channels, tuple(m.unet_mults), m.unet_blocks, m.embed_dim)
        else:
            self.cond_net = self.denoiser = None
        init_weights(self)

    def encode(self, hr, lr_up, generator=None, sample=True):
        """Latent and regularizer value for an HR / upsampled-LR pair."""
        if self.reg_mode == "kl":
            dist = dp_encode(hr, lr_up, self.encoder)
            z = reparameterize(dist, generator) if sample else dist.mu
            return z, kl_divergence(dist)
        z_q, reg, _ = self.quantizer(self.encoder(torch.cat([hr, lr_up], dim=1)))
        return z_q, reg

    def target_latent(self, hr, lr_up):
        """Noise-free latent used as the diffusion target."""
        return self.encode(hr, lr_up, sample=False)[0]

    def stage_modules(self, stage: int) -> dict:
        parts = STAGE1_PARTS + ("discriminator",) if stage == 1 else STAGE1_PARTS + ("discriminator",) + STAGE2_PARTS
        return {name: getattr(self, name) for name in parts if getattr(self, name) is not None}


def parameter_hash(modules) -> str:
    """SHA-256 over parameter bytes in name order."""
    if isinstance(modules, nn.Module):
        modules = {"": modules}
    h = hashlib.sha256()
    for prefix, module in modules.items():
        for name, tensor in sorted(module.state_dict().items()):
            h.update(f"{prefix}.{name}".encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def make_manifest(model: LatentSR, cfg: TrainConfig, stage: int, step: int = 0) -> CheckpointManifest:
    tensors = {}
    for prefix, module in model.stage_modules(stage).items():
        for k, v in state_to_arrays(module).items():
            tensors[f"{prefix}.{k}"] = v
    return CheckpointManifest(stage=stage, config=cfg.to_dict(), tensors=tensors, step=step)


def _resume(model: LatentSR, manifest: CheckpointManifest, stage: int) -> int:
    """Load parameters for ``stage`` from ``manifest`` and return its step count.

    Optimizer moments are not stored, so they restart from zero.
    """
    if manifest.stage != stage:
        raise CheckpointError(f"cannot resume stage {stage} from a stage-{manifest.stage} checkpoint")
    for prefix, module in model.stage_modules(stage).items():
        apply_arrays(module, manifest.tensors, prefix + ".")
    return manifest.step


def model_from_manifest(manifest: CheckpointManifest, require_stage: int = 1) -> tuple[LatentSR, TrainConfig]:
    """Rebuild networks from a manifest; raises if any required tensor is absent."""
    cfg = TrainConfig.from_dict(manifest.config)
    model = LatentSR(cfg, with_diffusion=require_stage >= 2)
    for prefix, module in model.stage_modules(require_stage).items():
        apply_arrays(module, manifest.tensors, prefix + ".")
    return model, cfg


def _log_line(path, step, values: dict):
    if not path:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"step={step} " + " ".join(f"{k}={v:.8g}" for k, v in values.items()) + "\n")


def _check_finite(report, batch, step, out_path):
    """Abort on a non-finite loss, saving the batch next to the checkpoint path."""
    values = report.scalars()
    if all(math.isfinite(v) for v in values.values()):
        return
    snapshot = (Path(out_path).parent if out_path else Path(".")) / f"nan_batch_step{step}.npz"
    snapshot.parent.mkdir(parents=True, exist_ok=True)
    hr, lr, lr_up, s = batch
    np.savez(snapshot, hr=hr.numpy(), lr=lr.numpy(), lr_up=lr_up.numpy(), scale=s)
    raise NumericalError(f"non-finite loss at step {step}: {values}; batch saved to {snapshot}", snapshot)


class Stage1Trainer:
    """Joint encoder + decoder training against L1, hinge-adversarial and KL/VQ terms.

    One generator update then one discriminator update per step. The
    discriminator stays frozen during warmup, when only L1 drives the generator.
    """

    def __init__(self, cfg: TrainConfig, dataset, model: LatentSR | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.dataset = dataset
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.noise = torch.Generator().manual_seed(cfg.seed)
        if model is None:
            largest = cfg.fixed_scale if cfg.fixed_scale is not None else cfg.scale_range[1]
            cfg.model.disc_layers = discriminator_layers(hr_size(cfg.lr_patch, largest), cfg.model.disc_layers)
            model = LatentSR(cfg, with_diffusion=False)
        self.model = model.to(dtype)
        self.gen_params = [p for name in STAGE1_PARTS if getattr(model, name) is not None
                           for p in getattr(model, name).parameters()]
        self.gen_opt = torch.optim.Adam(self.gen_params, lr=cfg.lr, betas=(0.9, 0.999))
        self.disc_opt = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
        self.step = 0

    @property
    def in_warmup(self) -> bool:
        return self.step // self.cfg.iters_per_epoch < self.cfg.warmup_epochs

    def next_batch(self):
        cfg = self.cfg
        samples = sample_batch(self.dataset, cfg.batch_size, cfg.lr_patch, self.rng,
                               tuple(cfg.scale_range), cfg.fixed_scale, cfg.augment)
        return collate(samples, self.dtype)

    def losses(self, batch, warmup: bool) -> tuple[Stage1LossReport, torch.Tensor]:
        hr, lr, lr_up, s = batch
        model = self.model
        z, reg = model.encode(hr, lr_up, self.noise)
        hr_hat = model.decoder(lr, z, s, clip=False)
        if warmup:
            with torch.no_grad():
                logits_fake = model.discriminator(hr_hat)
        else:
            logits_fake = model.discriminator(hr_hat)
        report = stage1_loss(hr, hr_hat, reg, logits_fake, self.cfg.w1, self.cfg.w2, warmup)
        return report, hr_hat

    def train_step(self, batch=None) -> Stage1LossReport:
        batch = batch if batch is not None else self.next_batch()
        warmup = self.in_warmup
        report, hr_hat = self.losses(batch, warmup)
        _check_finite(report, batch, self.step, self.cfg.out)

        self.gen_opt.zero_grad(set_to_none=True)
        report.total.backward()
        self.gen_opt.step()

        disc = self.model.discriminator
        hr = batch[0]
        self.disc_opt.zero_grad(set_to_none=True)
        if warmup:
            with torch.no_grad():
                d_loss = hinge_d_loss(disc(hr), disc(hr_hat.detach()))
        else:
            d_loss = hinge_d_loss(disc(hr), disc(hr_hat.detach()))
            d_loss.backward()
            self.disc_opt.step()
        report.disc_loss = d_loss.detach()
        _log_line(self.cfg.log_file, self.step, report.scalars())
        self.step += 1
        return report

    def fit(self, steps: int | None = None, callback=None):
        steps = max(self.cfg.total_steps - self.step, 0) if steps is None else steps
        history = []
        for _ in range(steps):
            report = self.train_step()
            history.append(report.scalars())
            if callback is not None:
                callback(self.step, report)
        return history

    def resume(self, manifest: CheckpointManifest) -> None:
        self.step = _resume(self.model, manifest, 1)

    def manifest(self) -> CheckpointManifest:
        return make_manifest(self.model, self.cfg, 1, self.step)


class Stage2Trainer:
    """Trains the conditioning network and denoiser with the encoder and decoder frozen.

    The default objective runs every reverse step deterministically from the
    fully-noised target latent and compares the result with the target. With
    ``random_timestep_training`` a single random step is trained on noise
    prediction instead.
    """

    def __init__(self, cfg: TrainConfig, dataset, stage1: CheckpointManifest | LatentSR | None,
                 dtype=torch.float32):
        if stage1 is None:
            raise CheckpointError("stage-2 training requires a stage-1 checkpoint")
        self.cfg = cfg
        self.dataset = dataset
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.noise = torch.Generator().manual_seed(cfg.seed)
        if isinstance(stage1, CheckpointManifest):
            frozen, s1_cfg = model_from_manifest(stage1, require_stage=1)
            cfg.model, cfg.reg_mode = s1_cfg.model, s1_cfg.reg_mode
            cfg.ablation.disable_modulation = s1_cfg.ablation.disable_modulation
            cfg.ablation.disable_sr_branch = s1_cfg.ablation.disable_sr_branch
            cfg.ablation.disable_prior_connections = s1_cfg.ablation.disable_prior_connections
        else:
            frozen = stage1
        m = cfg.model
        if frozen.cond_net is None:
            frozen.cond_net = CondNet(m.latent_channels, m.cond_channels, tuple(m.enc_mults))
            frozen.denoiser = Denoiser(m.latent_channels, m.unet_channels, tuple(m.unet_mults), m.unet_blocks,
                                       m.embed_dim)
            init_weights(frozen.cond_net)
            init_weights(frozen.denoiser)
        self.model = frozen.to(dtype)
        for name in STAGE1_PARTS + ("discriminator",):
            part = getattr(self.model, name)
            if part is not None:
                part.requires_grad_(False)
                part.eval()
        self.sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.params = list(self.model.cond_net.parameters()) + list(self.model.denoiser.parameters())
        self.opt = torch.optim.Adam(self.params, lr=cfg.lr, betas=(0.9, 0.999))
        self.step = 0

    def next_batch(self):
        cfg = self.cfg
        samples = sample_batch(self.dataset, cfg.batch_size, cfg.lr_patch, self.rng,
                               tuple(cfg.scale_range), cfg.fixed_scale, cfg.augment)
        return collate(samples, self.dtype)

    def losses(self, batch) -> Stage2LossReport:
        hr, lr, lr_up, s = batch
        model, sched, a = self.model, self.sched, self.cfg.ablation
        with torch.no_grad():
            z0 = model.target_latent(hr, lr_up)
        eps = torch.randn(z0.shape, generator=self.noise, dtype=z0.dtype)
        c = model.cond_net(lr_up)
        if a.random_timestep_training:
            t = int(self.rng.integers(1, sched.T + 1))
            eps_hat = model.denoiser(q_sample(z0, t, eps, sched), t, s, c)
            diffusion = l1_loss(eps_hat, eps)
            kd = l1_loss(c, z0)
            total = (0.0 if a.drop_diffusion_loss else diffusion) + (0.0 if a.drop_kd_loss else kd)
            return Stage2LossReport(diffusion=diffusion, kd=kd, total=torch.as_tensor(total))
        z_T = q_sample(z0, sched.T, eps, sched)
        z0_hat = rollout(z_T, s, c, sched, model.denoiser, stochastic=False)
        return stage2_loss(z0_hat, z0, c, use_diffusion=not a.drop_diffusion_loss, use_kd=not a.drop_kd_loss)

    def train_step(self, batch=None) -> Stage2LossReport:
        batch = batch if batch is not None else self.next_batch()
        report = self.losses(batch)
        _check_finite(report, batch, self.step, self.cfg.out)
        self.opt.zero_grad(set_to_none=True)
        if report.total.requires_grad:
            report.total.backward()
            if self.cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
            self.opt.step()
        _log_line(self.cfg.log_file, self.step, report.scalars())
        self.step += 1
        return report

    def fit(self, steps: int | None = None, callback=None):
        steps = max(self.cfg.total_steps - self.step, 0) if steps is None else steps
        history = []
        for _ in range(steps):
            report = self.train_step()
            history.append(report.scalars())
            if callback is not None:
                callback(self.step, report)
        return history

    def resume(self, manifest: CheckpointManifest) -> None:
        self.step = _resume(self.model, manifest, 2)

    def manifest(self) -> CheckpointManifest:
        return make_manifest(self.model, self.cfg, 2, self.step)

"""Training configuration and its flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig


@dataclass
class ModelConfig:
    latent_channels: int = 4
    enc_channels: int = 64
    enc_mults: tuple = (1, 2, 2, 4)
    prior_channels: int = 64
    sr_channels: int = 64
    n_fru: int = 4
    imdb_per_fru: int = 4
    csum_channels: int = 32
    csum_ratios: tuple = (1, 2, 3, 4)
    csum_hidden: int = 256
    modulation_hidden: int = 64
    cond_channels: int = 64
    unet_channels: int = 64
    unet_mults: tuple = (1, 2, 4)
    unet_blocks: int = 2
    embed_dim: int = 256
    disc_channels: int = 64
    disc_layers: int = 4
    codebook_size: int = 512
    commitment_weight: float = 0.25


@dataclass
class Ablation:
    disable_modulation: bool = False
    disable_sr_branch: bool = False
    disable_prior_connections: bool = False
    random_timestep_training: bool = False
    drop_kd_loss: bool = False
    drop_diffusion_loss: bool = False


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 400
    iters_per_epoch: int = 1000
    batch_size: int = 4
    lr: float = 1.8e-5
    lr_patch: int = 48
    scale_range: tuple = (1.0, 8.0)
    fixed_scale: typing.Optional[float] = None
    augment: bool = True
    warmup_epochs: int = 5
    w1: float = 1e-6
    w2: float = 0.5
    reg_mode: str = "kl"
    seed: int = 0
    T: int = 4
    beta_start: float = 0.99
    beta_end: float = 0.1
    grad_clip: float = 1.0
    data_dir: str = ""
    split_file: str = ""
    log_file: str = ""
    out: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    ablation: Ablation = field(default_factory=Ablation)

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "TrainConfig":
        """Published defaults for each stage, with keyword overrides."""
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        base = {} if stage == 1 else dict(epochs=50, batch_size=8, lr=8e-5, warmup_epochs=0)
        base.update(overrides)
        return cls(stage=stage, **base)

    def __post_init__(self):
        if self.reg_mode not in ("kl", "vq"):
            raise ValueError(f"reg_mode must be 'kl' or 'vq', got {self.reg_mode!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    def decoder_config(self) -> DecoderConfig:
        m, a = self.model, self.ablation
        return DecoderConfig(
            latent_channels=m.latent_channels,
            prior_channels=m.prior_channels,
            sr_channels=m.sr_channels,
            n_fru=m.n_fru,
            imdb_per_fru=m.imdb_per_fru,
            csum_channels=m.csum_channels,
            csum_ratios=tuple(m.csum_ratios),
            csum_hidden=m.csum_hidden,
            modulation_hidden=m.modulation_hidden,
            disable_modulation=a.disable_modulation,
            disable_sr_branch=a.disable_sr_branch,
            disable_prior_connections=a.disable_prior_connections,
        )

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, d: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        value = d[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value)
        elif hint is tuple:
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _parse_value(text: str, hint):
    text = text.strip()
    if typing.get_origin(hint) is typing.Union:
        if text.lower() in ("none", ""):
            return None
        hint = next(h for h in typing.get_args(hint) if h is not type(None))
    if hint is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is tuple:
        parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
        return tuple(int(p) if p.lstrip("-").isdigit() else float(p) for p in parts)
    return text


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments, dotted keys for nested sections)."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = (lineno, value)
    stage = int(entries.pop("stage", (0, "1"))[1])
    cfg = TrainConfig.for_stage(stage)
    for key, (lineno, value) in entries.items():
        target = cfg
        *path, name = key.split(".")
        for part in path:
            target = getattr(target, part, None)
            if not dataclasses.is_dataclass(target):
                raise ValueError(f"line {lineno}: unknown section {part!r}")
        hints = typing.get_type_hints(type(target))
        if name not in hints:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(target, name, _parse_value(value, hints[name]))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    cfg.__post_init__()
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))

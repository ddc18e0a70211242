from pathlib import Path

import numpy as np
import pytest
import torch

from latent_sr.config import ModelConfig, TrainConfig
from latent_sr.data import ImageFolder

DATA_DIR = Path(__file__).parent / "data"


def tiny_model(**overrides) -> ModelConfig:
    """Widths small enough for CPU unit tests."""
    base = dict(enc_channels=8, prior_channels=8, sr_channels=8, imdb_per_fru=1, csum_channels=4, csum_hidden=16,
                modulation_hidden=8, cond_channels=8, unet_channels=8, embed_dim=16, disc_channels=8,
                codebook_size=16)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(stage=1, **overrides) -> TrainConfig:
    base = dict(lr_patch=8, batch_size=2, iters_per_epoch=2, warmup_epochs=1, fixed_scale=2.0, lr=1e-3,
                model=tiny_model())
    base.update(overrides)
    return TrainConfig.for_stage(stage, **base)


def central_difference_check(loss_fn, params, n_samples, step, seed=0):
    """Compare autograd against central differences on randomly chosen scalar entries."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    for _ in range(n_samples):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        i = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
        fd = (up - down) / (2 * step)
        an = 0.0 if grads[k] is None else grads[k].view(-1)[i].item()
        denom = max(abs(an), abs(fd), 1e-7)
        worst = max(worst, abs(an - fd) / denom)
    return worst


@pytest.fixture(scope="session")
def images():
    data = ImageFolder(DATA_DIR, DATA_DIR / "train.txt")
    return [data[i] for i in range(len(data))]

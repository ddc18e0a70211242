"""Image I/O, bicubic degradation and continuous-scale patch sampling.

Images travel through the package as ``float32`` numpy arrays of shape
``(height, width, 3)`` with values in ``[0, 1]``. Network code converts them
to ``(N, C, H, W)`` tensors at the boundary (see :func:`to_tensor`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import EmptyDatasetError, InsufficientSourceError

KEYS_A = -0.5
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate the ``(H, W, 3)`` / finite / ``[0, 1]`` image contract."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} has empty spatial dims {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} values outside [0, 1]")
    return img


def keys_kernel(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x < 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` bicubic interpolation matrix along one axis.

    Pixel-center alignment: output pixel ``i`` samples source coordinate
    ``(i + 0.5) * n_in / n_out - 0.5``. Taps falling outside the source are
    clamped to the nearest edge pixel. No antialiasing prefilter is applied.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize dims must be positive, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(mat, 1.0)
        return mat
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    for offset in range(-1, 3):
        idx = base + offset
        w = keys_kernel(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def _check_target(target) -> tuple[int, int]:
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValueError(f"target dims must be >= 1, got {tuple(target)}")
    return h, w


def bicubic_resize(img: np.ndarray, target, clip: bool = True) -> np.ndarray:
    """Resize an ``(H, W, C)`` array to ``target = (height, width)``.

    ``clip=False`` returns the raw (linear) interpolation, which may overshoot
    ``[0, 1]`` near edges.
    """
    h, w = _check_target(target)
    if img.shape[0] == h and img.shape[1] == w:
        out = img.copy()
    else:
        ah = resize_matrix(img.shape[0], h)
        aw = resize_matrix(img.shape[1], w)
        tmp = np.tensordot(ah, img.astype(np.float64), axes=(1, 0))
        out = np.tensordot(tmp, aw, axes=(1, 1)).transpose(0, 2, 1)
        out = np.ascontiguousarray(out, dtype=img.dtype if img.dtype.kind == "f" else np.float32)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def resize_tensor(x: torch.Tensor, size) -> torch.Tensor:
    """Differentiable bicubic resize of a ``(..., H, W)`` tensor, no clipping."""
    h, w = _check_target(size)
    if x.shape[-2] == h and x.shape[-1] == w:
        return x
    ah = torch.as_tensor(resize_matrix(x.shape[-2], h), dtype=x.dtype, device=x.device)
    aw = torch.as_tensor(resize_matrix(x.shape[-1], w), dtype=x.dtype, device=x.device)
    return ah @ x @ aw.T


def hr_size(lr_size: int, scale: float) -> int:
    """HR extent for an LR extent: ``scale * lr_size`` rounded down to a multiple of 8."""
    return int(math.floor(scale * lr_size / 8 + 1e-9)) * 8


@dataclass(frozen=True)
class TrainSample:
    hr: np.ndarray
    lr: np.ndarray
    lr_up: np.ndarray
    scale: float


def make_training_pair(
    hr_source: np.ndarray, lr_patch_size: int, scale: float, rng: np.random.Generator
) -> TrainSample:
    """Crop an HR patch matching ``scale`` and derive its LR / re-upsampled LR views.

    The stored scale is the effective ratio ``H / lr_patch_size`` after the HR
    crop is rounded down to a multiple of 8.
    """
    if not 1.0 <= scale <= 8.0:
        raise ValueError(f"scale must lie in [1, 8], got {scale}")
    if lr_patch_size < 8 or lr_patch_size % 8:
        raise ValueError(f"lr_patch_size must be a positive multiple of 8, got {lr_patch_size}")
    size = hr_size(lr_patch_size, scale)
    src_h, src_w = hr_source.shape[:2]
    if src_h < size or src_w < size:
        raise InsufficientSourceError(
            f"source {src_h}x{src_w} smaller than required HR crop {size}x{size}"
        )
    top = int(rng.integers(0, src_h - size + 1))
    left = int(rng.integers(0, src_w - size + 1))
    hr = np.ascontiguousarray(hr_source[top : top + size, left : left + size], dtype=np.float32)
    lr = bicubic_resize(hr, (lr_patch_size, lr_patch_size))
    lr_up = bicubic_resize(lr, (size, size))
    return TrainSample(hr=hr, lr=lr, lr_up=lr_up, scale=size / lr_patch_size)


def transform_image(img: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    if hflip:
        img = img[:, ::-1]
    if vflip:
        img = img[::-1]
    if rot % 4:
        img = np.rot90(img, k=rot % 4, axes=(0, 1))
    return np.ascontiguousarray(img)


def apply_transform(sample: TrainSample, hflip: bool, vflip: bool, rot: int) -> TrainSample:
    """Apply the same dihedral transform to every image of a sample."""
    return TrainSample(
        hr=transform_image(sample.hr, hflip, vflip, rot),
        lr=transform_image(sample.lr, hflip, vflip, rot),
        lr_up=transform_image(sample.lr_up, hflip, vflip, rot),
        scale=sample.scale,
    )


def augment(sample: TrainSample, rng: np.random.Generator) -> TrainSample:
    hflip, vflip = bool(rng.integers(2)), bool(rng.integers(2))
    rot = int(rng.integers(4))
    return apply_transform(sample, hflip, vflip, rot)


def sample_batch(
    dataset: Sequence[np.ndarray],
    batch_size: int,
    lr_patch_size: int,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (1.0, 8.0),
    scale: float | None = None,
    augmentation: bool = False,
) -> list[TrainSample]:
    """Draw one batch sharing a single scale factor.

    The scale is drawn uniformly from ``scale_range`` unless ``scale`` pins it.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    if scale is None:
        scale = float(rng.uniform(*scale_range))
    batch = []
    for _ in range(batch_size):
        img = dataset[int(rng.integers(len(dataset)))]
        sample = make_training_pair(img, lr_patch_size, scale, rng)
        if augmentation:
            sample = augment(sample, rng)
        batch.append(sample)
    return batch


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(H, W, 3)`` arrays into an ``(N, 3, H, W)`` tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def to_image(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor` for a single image (batch dim optional)."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("to_image expects a single image")
        x = x[0]
    return x.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)


def collate(batch: Sequence[TrainSample], dtype=torch.float32):
    """Turn a list of samples into ``(hr, lr, lr_up, scale)`` tensors."""
    scales = {s.scale for s in batch}
    if len(scales) != 1:
        raise ValueError(f"batch mixes scale factors {sorted(scales)}")
    return (
        to_tensor([s.hr for s in batch], dtype),
        to_tensor([s.lr for s in batch], dtype),
        to_tensor([s.lr_up for s in batch], dtype),
        batch[0].scale,
    )


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def list_images(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


class ImageFolder:
    """Directory of RGB images, optionally restricted by a split file.

    The split file lists one filename per line; blank lines and ``#`` comments
    are ignored. Images are decoded once and cached.
    """

    def __init__(self, root, split_file=None):
        self.root = Path(root)
        if split_file is not None:
            names = [
                line.strip()
                for line in Path(split_file).read_text().splitlines()
                if line.strip() and not line.lstrip().startswith("#")
            ]
            self.paths = [self.root / n for n in names]
        else:
            self.paths = list_images(self.root)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, idx: int) -> np.ndarray:
        if idx not in self._cache:
            self._cache[idx] = load_image(self.paths[idx])
        return self._cache[idx]

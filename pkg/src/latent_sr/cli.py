"""Command-line entry point: ``latent-sr <command> ...``.

Exit codes: 0 success, 2 invalid arguments, 3 checkpoint or integrity error,
4 numerical failure during training or inference.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import ImageFolder, bicubic_resize, hr_size, list_images, load_image, save_image
from .errors import CheckpointError, NumericalError
from .inference import SuperResolver, psnr

log = logging.getLogger("latent_sr")

EXIT_OK, EXIT_ARGS, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = list_images(path)
        if not files:
            raise ValueError(f"no images found in {path}")
        return files
    if not path.is_file():
        raise ValueError(f"input {path} does not exist")
    return [path]


def cmd_degrade(args) -> int:
    """Write bicubic LR images plus the matching HR crops used as ground truth."""
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    for path in _inputs(Path(args.inp)):
        hr = load_image(path)
        h, w = int(hr.shape[0] // args.scale), int(hr.shape[1] // args.scale)
        if h < 1 or w < 1:
            raise ValueError(f"{path.name} is too small for scale {args.scale}")
        hh, ww = hr_size(h, args.scale), hr_size(w, args.scale)
        if hh < 8 or ww < 8:
            raise ValueError(f"{path.name} is too small for scale {args.scale}")
        top = int(rng.integers(0, hr.shape[0] - hh + 1))
        left = int(rng.integers(0, hr.shape[1] - ww + 1))
        crop = hr[top:top + hh, left:left + ww]
        save_image(crop, out / "hr" / f"{path.stem}.png")
        save_image(bicubic_resize(crop, (h, w)), out / "lr" / f"{path.stem}.png")
    return EXIT_OK


def _dataset(cfg):
    if not cfg.data_dir:
        raise ValueError("config must set data_dir")
    data = ImageFolder(cfg.data_dir, cfg.split_file or None)
    if len(data) == 0:
        raise ValueError(f"no training images under {cfg.data_dir}")
    return data


def _save(trainer, cfg, default_name):
    path = Path(cfg.out or default_name)
    save_checkpoint(path, trainer.manifest())
    print(f"checkpoint written to {path}")


def cmd_train_stage1(args) -> int:
    from .training import Stage1Trainer

    cfg = load_config(args.config)
    if cfg.stage != 1:
        raise ValueError(f"config declares stage {cfg.stage}, expected 1")
    trainer = Stage1Trainer(cfg, _dataset(cfg))
    if args.resume:
        trainer.resume(load_checkpoint(args.resume))
    trainer.fit()
    _save(trainer, cfg, "stage1.ckpt")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    from .training import Stage2Trainer

    cfg = load_config(args.config)
    if cfg.stage != 2:
        raise ValueError(f"config declares stage {cfg.stage}, expected 2")
    trainer = Stage2Trainer(cfg, _dataset(cfg), load_checkpoint(args.stage1))
    if args.resume:
        trainer.resume(load_checkpoint(args.resume))
    trainer.fit()
    _save(trainer, cfg, "stage2.ckpt")
    return EXIT_OK


def cmd_infer(args) -> int:
    resolver = SuperResolver.from_file(args.ckpt)
    out = Path(args.out)
    for path in _inputs(Path(args.inp)):
        sr = resolver(load_image(path), args.scale, args.seed)
        save_image(sr, out / f"{path.stem}.png")
        print(f"{path.name}\t{sr.shape[0]}x{sr.shape[1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    scores = []
    for gt_path in _inputs(gt_dir):
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise ValueError(f"no prediction for {gt_path.name} in {pred_dir}")
        value = psnr(load_image(pred_path), load_image(gt_path))
        scores.append(value)
        print(f"{gt_path.name}\t{value:.4f}")
    print(f"mean\t{np.mean(scores):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-sr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="make bicubic LR/HR pairs from a folder of HR images")
    p.add_argument("--in", dest="inp", required=True, help="HR image or directory")
    p.add_argument("--out", required=True, help="output directory (gets hr/ and lr/)")
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--seed", type=int, default=0, help="seeds the HR crop offsets")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-stage1", help="train encoder, decoder and discriminator")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="stage-1 checkpoint to continue from")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the conditioning network and denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint (frozen)")
    p.add_argument("--resume", help="stage-2 checkpoint to continue from")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("infer", help="super-resolve an image or a directory of images")
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    p.add_argument("--in", dest="inp", required=True, help="LR image or directory")
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser(
        "eval",
        help="PSNR per image and mean, tab-separated",
        description="PSNR on RGB values in [0, 1], no luma conversion or border crop, capped at 100 dB. "
        "Predictions are matched to ground truth by file name.",
    )
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``cracknex {train,eval,predict,decompose,synth,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data
from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .data import DatasetError, Episode, ImageSample
from .engine import binarize, evaluate, format_ablation_table, run_ablation, train
from .model import predict
from .retinex import decompose

SEED_ENV = "CRACKNEX_SEED"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(arg_seed):
    """--seed wins over $CRACKNEX_SEED, which wins over 0."""
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _log_line(line: str):
    print(line, file=sys.stderr, flush=True)


def _require_dir(path, flag):
    if not Path(path).is_dir():
        raise UsageError(f"{flag}: {path} is not a directory")


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    seed = _seed(args.seed)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    _require_dir(args.data, "--data")
    dataset = data.load_dataset(args.data, cfg.image_size, "base")
    train(cfg, dataset, out_path=args.out, on_log=_log_line)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.shots < 1 or args.episodes < 1:
        raise UsageError("--shots and --episodes must be >= 1")
    cp = load_checkpoint(args.checkpoint)
    _require_dir(args.data, "--data")
    dataset = data.load_dataset(args.data, cp.config.image_size, "novel")
    seed = _seed(args.seed)
    report = evaluate(cp, dataset, args.shots, args.episodes, 0 if seed is None else seed)
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(report.to_json())
    print(f"mIoU={report.miou:.6f}")
    return EXIT_OK


def _support_pair(text: str):
    parts = text.split(",")
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"--support expects IMAGE,MASK, got {text!r}")
    for p in parts:
        if not Path(p).is_file():
            raise UsageError(f"--support: file not found: {p}")
    return parts


def cmd_predict(args) -> int:
    pairs = [_support_pair(s) for s in args.support]
    if not Path(args.query).is_file():
        raise UsageError(f"--query: file not found: {args.query}")
    cp = load_checkpoint(args.checkpoint)
    size = cp.config.image_size
    supports = [
        ImageSample(f"support_{i}", data.read_image(img, size), data.read_mask(mask, size))
        for i, (img, mask) in enumerate(pairs)
    ]
    with Image.open(args.query) as im:
        original = (im.size[1], im.size[0])
    query = ImageSample("query", data.read_image(args.query, size), np.zeros(size, dtype=np.uint8))
    prob = predict(Episode(supports, query), model_from_checkpoint(cp))
    mask = Image.fromarray(binarize(prob) * 255)
    if (mask.size[1], mask.size[0]) != original:
        mask = mask.resize((original[1], original[0]), Image.NEAREST)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    mask.save(args.out, format="PNG")
    return EXIT_OK


def cmd_decompose(args) -> int:
    src = Path(args.input)
    if src.is_dir():
        inputs = sorted(p for p in src.iterdir() if p.suffix.lower() in data.IMAGE_EXTENSIONS)
    elif src.is_file():
        inputs = [src]
    else:
        raise UsageError(f"--input: {src} does not exist")
    if args.sigma is not None and args.sigma <= 0:
        raise UsageError("--sigma must be > 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        d = decompose(data.read_image(path), args.sigma)
        data.write_image(out / f"{path.stem}_reflectance.png", d.reflectance)
        data.write_image(out / f"{path.stem}_illumination.png", d.illumination)
    return EXIT_OK


def _lowlight(text: str):
    try:
        gamma, gain, sigma = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--lowlight expects GAMMA,GAIN,SIGMA, got {text!r}") from None
    return gamma, gain, sigma


def cmd_synth(args) -> int:
    H, W = args.size
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    lowlight = _lowlight(args.lowlight) if args.lowlight else None
    seed = _seed(args.seed)
    seed = 0 if seed is None else seed
    style = data.CrackStyle(args.crack_width, args.contrast, args.texture_scale)
    try:
        dataset = data.synthetic_dataset(args.count, H, W, seed, style)
    except (ValueError, DatasetError) as exc:
        raise UsageError(str(exc)) from exc
    data.save_dataset(dataset, args.out)
    if lowlight:
        try:
            dark = data.lowlight_dataset(dataset, *lowlight, seed=seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        data.save_dataset(dark, Path(args.out) / "lowlight")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    seed = _seed(args.seed)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if args.episodes is not None and args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    _require_dir(args.train_data, "--train-data")
    _require_dir(args.test_data, "--test-data")
    train_ds = data.load_dataset(args.train_data, cfg.image_size, "base")
    test_ds = data.load_dataset(args.test_data, cfg.image_size, "novel")
    rows = run_ablation(cfg, train_ds, test_ds, episode_count=args.episodes)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    print(format_ablation_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cracknex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="episodic training on a base (normal-light) dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU over seeded K-shot episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one query image from labelled supports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", action="append", required=True, metavar="IMAGE,MASK")
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("decompose", help="write reflectance and illumination images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("synth", help="write a synthetic crack dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=(64, 64))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--lowlight", metavar="GAMMA,GAIN,SIGMA")
    p.add_argument("--crack-width", type=float, default=6.0)
    p.add_argument("--contrast", type=float, default=0.6)
    p.add_argument("--texture-scale", type=float, default=8.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train and evaluate the four component configurations")
    p.add_argument("--config")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError, CheckpointError) as exc:
        code = EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

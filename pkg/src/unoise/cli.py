"""Command-line pipeline: synth-data -> train-utility -> train-noise -> evaluate.

Every artifact-producing command writes into a fresh temporary directory next
to ``--out`` and renames it into place only when the run succeeds, so a failed
run never leaves a half-written output directory.  Each output directory holds
``config.json`` with the fully resolved arguments.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, missing
flag, unreadable path).  Diagnostics are a single line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, SyntheticTaskSpec, generate_synthetic, load_dataset, save_dataset, split
from .eval import (benchmark_csv, benchmark_text, dice_near_visibility, runtime_benchmark,
                   sweep_csv, visibility_sweep)
from .interpret import export_pgm, grad_cam, occlusion_sensitivity, unoise_map
from .training import (NoiseTrainConfig, OptimizerSettings, pretrain_noise_model, train_unoise,
                       train_utility, write_csv)
from .unet import PRESETS, UNetConfig, load_checkpoint, noise_config, save_checkpoint

PROG = "unoise"
OUT_ENV = "UNOISE_OUT"
NOISE_COLUMNS = ["epoch", "utility_loss", "noise_term", "mean_B", "val_dice"]

logger = logging.getLogger(PROG)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _readable_dir(value: str) -> Path:
    p = Path(value)
    if not p.is_dir() and not (p.is_file() and p.name.endswith(".json")):
        raise argparse.ArgumentTypeError(f"cannot read dataset at {value!r}")
    return p


def _readable_file(value: str) -> Path:
    p = Path(value)
    if not p.is_file() or not os.access(p, os.R_OK):
        raise argparse.ArgumentTypeError(f"cannot read file {value!r}")
    return p


def _unit_interval(value: str) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return v


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / name


@contextlib.contextmanager
def _staged(out: Path):
    """Yield a temp dir; on success it replaces ``out`` wholesale."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if out.exists():
        old = out.with_name(f".{out.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        out.rename(old)
    tmp.rename(out)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _snapshot(directory: Path, args: argparse.Namespace, **resolved) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k not in ("func", "out", "verbose")}
    cfg.update(resolved)
    (directory / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _load_split(args) -> tuple[Dataset, Dataset]:
    ds = load_dataset(args.data)
    return split(ds, 1.0 - args.val_fraction, args.split_seed)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=_readable_dir, required=True, help="dataset directory")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)


def _add_common(p: argparse.ArgumentParser, name: str) -> None:
    p.add_argument("--out", type=Path, default=None,
                   help=f"output directory (default ${OUT_ENV}/{name})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conv-backend", choices=T._CONV_BACKENDS, default="auto")
    p.add_argument("-v", "--verbose", action="store_true")


# ---------------------------------------------------------------- commands

def cmd_synth_data(args) -> None:
    spec = SyntheticTaskSpec(**{f.name: getattr(args, f.name) for f in fields(SyntheticTaskSpec)
                                if hasattr(args, f.name)})
    spec.validate()
    ds = generate_synthetic(spec, args.n, args.seed)
    with _staged(args.out) as tmp:
        save_dataset(ds, tmp)
        _snapshot(tmp, args, task=asdict(spec))
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_train_utility(args) -> None:
    train, val = _load_split(args)
    config = UNetConfig(args.depth, args.base_channels, train.image_shape[0], 2)
    opts = OptimizerSettings(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    model, history = train_utility(train, val, config, opts)
    with _staged(args.out) as tmp:
        save_checkpoint(model, tmp / "utility.ckpt")
        write_csv(tmp / "metrics.csv", history)
        _snapshot(tmp, args, model=asdict(config), optimizer=asdict(opts))
    final = history[-1].get("val_dice", float("nan")) if history else float("nan")
    print(f"utility val dice {final:.4f}; wrote {args.out}")


def _noise_arch(args, in_channels: int) -> UNetConfig:
    base = noise_config(args.preset, in_channels)
    depth = args.depth if args.depth is not None else base.depth
    width = args.base_channels if args.base_channels is not None else base.base_channels
    return UNetConfig(depth, width, in_channels, 1, base.head)


def cmd_train_noise(args) -> None:
    train, val = _load_split(args)
    utility = load_checkpoint(args.utility_ckpt)
    arch = _noise_arch(args, train.image_shape[0])
    cfg = NoiseTrainConfig(lam=args.lam, sigma_min=args.sigma_min, sigma_max=args.sigma_max,
                           lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                           seed=args.seed, pretrain=args.pretrain,
                           pretrain_epochs=args.pretrain_epochs)
    init = None
    if cfg.pretrain:
        opts = OptimizerSettings(lr=cfg.lr, batch_size=cfg.batch_size,
                                 epochs=cfg.pretrain_epochs, seed=cfg.seed)
        init, _ = pretrain_noise_model(train, val, arch, opts)
    model, history = train_unoise(train, val, utility, arch, cfg, init=init)
    model.meta["preset"] = args.preset
    rows = [{k: r.get(k, float("nan")) for k in NOISE_COLUMNS} for r in history]
    with _staged(args.out) as tmp:
        save_checkpoint(model, tmp / "noise.ckpt")
        write_csv(tmp / "metrics.csv", rows)
        _snapshot(tmp, args, model=asdict(arch), training=asdict(cfg))
    if rows:
        print(f"noise model mean B {rows[-1]['mean_B']:.3f}, noised val dice "
              f"{rows[-1]['val_dice']:.4f}; wrote {args.out}")


def cmd_interpret(args) -> None:
    ds = load_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ValueError(f"--index {args.index} out of range for {len(ds)} samples")
    x = ds[args.index].image
    if args.method == "unoise":
        if args.noise_ckpt is None:
            raise UsageError("--noise-ckpt is required for --method unoise")
        _, imap = unoise_map(load_checkpoint(args.noise_ckpt), x)
    else:
        if args.utility_ckpt is None:
            raise UsageError(f"--utility-ckpt is required for --method {args.method}")
        utility = load_checkpoint(args.utility_ckpt)
        if args.method == "occlusion":
            imap = occlusion_sensitivity(utility, x, args.window, args.stride, args.fill)
        else:
            imap = grad_cam(utility, x)
    with _staged(args.out) as tmp:
        export_pgm(imap, tmp / f"{ds[args.index].id}_{args.method}.pgm")
        np.save(tmp / f"{ds[args.index].id}_{args.method}.npy", imap.values)
        _snapshot(tmp, args)
    print(f"wrote {args.method} map for {ds[args.index].id} to {args.out}")


def cmd_evaluate(args) -> None:
    _, val = _load_split(args)
    utility = load_checkpoint(args.utility_ckpt)
    thresholds = args.thresholds or np.round(np.linspace(0, 1, 21), 10).tolist()
    sweep_rows, near_rows = [], []
    for path in args.noise_ckpt:
        noise = load_checkpoint(path)
        tag = str(noise.meta.get("preset", Path(path).parent.name))
        pre = bool(noise.meta.get("pretrained", False))
        sweep_rows += visibility_sweep(utility, noise, val, thresholds, tag, pre)
        near_rows.append(dice_near_visibility(utility, noise, val, args.near, tag, pre))
    with _staged(args.out) as tmp:
        (tmp / "sweep.csv").write_text(sweep_csv(sweep_rows))
        (tmp / "near_visibility.csv").write_text(sweep_csv(near_rows))
        _snapshot(tmp, args, thresholds=list(thresholds))
    for r in near_rows:
        print(f"{r.model} pretrained={int(r.pretrained)}: dice {r.dice:.4f} at "
              f"{100 * r.percent_visible:.1f}% visible")


def cmd_benchmark(args) -> None:
    ds = load_dataset(args.data)
    x = ds[args.index].image
    utility = load_checkpoint(args.utility_ckpt)
    noise = load_checkpoint(args.noise_ckpt)
    methods = {
        "unoise": lambda img: unoise_map(noise, img),
        "gradcam": lambda img: grad_cam(utility, img),
        "occlusion": lambda img: occlusion_sensitivity(utility, img, args.window, args.stride),
    }
    rows = runtime_benchmark(methods, x, args.trials)
    with _staged(args.out) as tmp:
        (tmp / "benchmark.csv").write_text(benchmark_csv(rows))
        (tmp / "benchmark.txt").write_text(benchmark_text(rows))
        _snapshot(tmp, args)
    sys.stdout.write(benchmark_text(rows))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Learned noise-mask interpretability for U-Net segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic context task")
    p.add_argument("--n", type=int, default=512)
    defaults = SyntheticTaskSpec()
    for f in fields(SyntheticTaskSpec):
        if f.name in ("offset", "landmark_quiet"):
            continue
        p.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)),
                       default=getattr(defaults, f.name))
    p.add_argument("--offset", type=int, nargs=2, default=list(defaults.offset), metavar=("DY", "DX"))
    _add_common(p, "data")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-utility", help="train the segmentation model to interpret")
    _add_data_args(p)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=30)
    _add_common(p, "utility")
    p.set_defaults(func=cmd_train_utility)

    nd = NoiseTrainConfig()
    p = sub.add_parser("train-noise", help="train the noise-mask model against a frozen utility")
    _add_data_args(p)
    p.add_argument("--utility-ckpt", type=_readable_file, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="medium")
    p.add_argument("--depth", type=int, default=None, help="override the preset depth")
    p.add_argument("--base-channels", type=int, default=None, help="override the preset width")
    p.add_argument("--lam", type=float, default=nd.lam)
    p.add_argument("--sigma-min", type=float, default=nd.sigma_min)
    p.add_argument("--sigma-max", type=float, default=nd.sigma_max)
    p.add_argument("--lr", type=float, default=nd.lr)
    p.add_argument("--batch-size", type=int, default=nd.batch_size)
    p.add_argument("--epochs", type=int, default=nd.epochs)
    p.add_argument("--pretrain", action="store_true")
    p.add_argument("--pretrain-epochs", type=int, default=nd.pretrain_epochs)
    _add_common(p, "noise")
    p.set_defaults(func=cmd_train_noise)

    p = sub.add_parser("interpret", help="export an importance map as PGM")
    p.add_argument("--data", type=_readable_dir, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--method", choices=["unoise", "occlusion", "gradcam"], default="unoise")
    p.add_argument("--utility-ckpt", type=_readable_file)
    p.add_argument("--noise-ckpt", type=_readable_file)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--fill", type=float, default=0.0)
    _add_common(p, "maps")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("evaluate", help="visibility sweep and dice near a visibility target")
    _add_data_args(p)
    p.add_argument("--utility-ckpt", type=_readable_file, required=True)
    p.add_argument("--noise-ckpt", type=_readable_file, required=True, action="append")
    p.add_argument("--thresholds", type=_unit_interval, nargs="+", default=None)
    p.add_argument("--near", type=_unit_interval, default=0.5)
    _add_common(p, "eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="per-image runtime of the three map methods")
    p.add_argument("--data", type=_readable_dir, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--utility-ckpt", type=_readable_file, required=True)
    p.add_argument("--noise-ckpt", type=_readable_file, required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--stride", type=int, default=2)
    _add_common(p, "benchmark")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{PROG}: usage error: {e}", file=sys.stderr)
        return 2
    if args.out is None:
        args.out = _default_out(args.command)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    T.set_conv_backend(args.conv_backend)
    try:
        with T.precision(32):
            args.func(args)
    except UsageError as e:
        print(f"{PROG}: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI reports every failure on one line
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"{PROG}: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

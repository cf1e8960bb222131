"""``amcnn`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .data import SynthConfig, attach_density, load_dataset, save_sample, synth_dataset
from .density import (
    DOWNSAMPLE,
    HeadAnnotations,
    density_from_annotations,
    sum_pool_downsample,
)
from .errors import AmcnnError, CheckpointError, DataError, NumericalError
from .gradsuite import run_suite
from .losses import mae_mse

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

logger = logging.getLogger("amcnn")

_DEFAULTS = TrainConfig()


class UsageError(AmcnnError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this tool reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    """Shows defaults; flags whose default lives in TrainConfig state it in their own help text."""

    def _get_help_string(self, action):
        if action.default is None or action.default == [] or action.default is False:
            return action.help
        return super()._get_help_string(action)


# flags that map one-to-one onto TrainConfig keys; (flag, key, type, help)
_TRAIN_FLAGS = [
    ("--lr", "lr", float, "Adam learning rate"),
    ("--pretrain-lr", "pretrain_lr", float, "learning rate while pretraining columns (0 = same as --lr)"),
    ("--beta1", "beta1", float, "Adam first-moment decay"),
    ("--beta2", "beta2", float, "Adam second-moment decay"),
    ("--eps", "eps", float, "Adam epsilon"),
    ("--batch", "batch", int, "patches per step"),
    ("--alpha", "alpha", float, "weight of the relative-deviation loss"),
    ("--z", "z", float, "additive constant in the relative-deviation denominator"),
    ("--c-p", "c_p", int, "random crops per image per epoch while pretraining"),
    ("--c-f", "c_f", int, "random crops per image per epoch while fine-tuning (0 = whole image)"),
    ("--pretrain-iters", "pretrain_iters", int, "steps per column in pretraining"),
    ("--finetune-iters", "finetune_iters", int, "steps of whole-network fine-tuning"),
    ("--variant", "variant", str, "network variant: AM-CNN, AM-CNN(3), AM-CNN(L|M|S)"),
    ("--init-std", "init_std", float, "standard deviation of initial weights"),
    ("--head-init", "head_init", str, "output-head weight init: halfnormal (|N(0, init_std^2)|) or normal"),
    ("--attention-kernel", "attention_kernel", int, "odd kernel size of the attention convolution"),
    ("--checkpoint-every", "checkpoint_every", int, "save a checkpoint every N fine-tuning steps (0 = only at the end)"),
    ("--eval-every", "eval_every", int, "evaluate on --eval-data every N fine-tuning steps (0 = never)"),
]

_SIGMA_HELP = "density kernel width: knn:BETA (adaptive; fixed sigma 4 fallback for scenes too sparse for k-NN), persp, or fixed:SIGMA"


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_common(p, sigma=True):
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: {_DEFAULTS.seed})")
    p.add_argument("--threads", type=int, default=None,
                   help=f"maximum BLAS/worker threads (default: {_DEFAULTS.threads})")
    p.add_argument("--config", metavar="FILE", help="key=value configuration file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="configuration override, repeatable; wins over --config")
    if sigma:
        p.add_argument("--sigma", default=None, help=f"{_SIGMA_HELP} (default: {_DEFAULTS.sigma})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_train_flags(p):
    for flag, key, typ, text in _TRAIN_FLAGS:
        p.add_argument(flag, type=typ, default=None, dest=key, help=f"{text} (default: {getattr(_DEFAULTS, key)})")
    p.add_argument("--use-rd", type=_bool, default=None, dest="use_rd",
                   help=f"include the relative-deviation loss (default: {str(_DEFAULTS.use_rd).lower()})")
    p.add_argument("--flip", type=_bool, default=None, dest="flip",
                   help=f"add mirrored copies while fine-tuning (default: {str(_DEFAULTS.flip).lower()})")
    p.add_argument("--rescale", type=_bool, default=None, dest="rescale",
                   help="multiply the attention map by its number of positions before reweighting "
                        f"(default: {str(_DEFAULTS.rescale).lower()})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amcnn", description="Attention-based crowd counting toolkit.", formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-density", formatter_class=_Formatter,
                       help="write ground-truth density maps from head annotations",
                       description="For each annotation CSV write <out>/<stem>.dmap.  The image size comes from a "
                                   "sibling <stem>.pgm/.ppm unless --size is given.")
    p.add_argument("annotations", nargs="+", help="annotation CSV files (x,y per line)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", metavar="HxW", help="image size when there is no sibling image")
    p.add_argument("--perspective", metavar="PMAP", help="perspective map for --sigma persp (default: sibling <stem>.pmap)")
    p.add_argument("--scale", type=int, choices=(1, DOWNSAMPLE), default=1,
                   help="1 for full resolution, 4 for block-summed network-resolution maps")
    _add_common(p)

    p = sub.add_parser("synth", formatter_class=_Formatter, help="generate a synthetic annotated dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=8, help="number of scenes")
    p.add_argument("--size", metavar="HxW", default="128x128", help="scene size, each side divisible by 4")
    p.add_argument("--heads", metavar="MIN-MAX", default="5-20", help="heads per scene")
    p.add_argument("--radius", metavar="MIN-MAX", default="3-6", help="head radius in pixels")
    p.add_argument("--noise", type=float, default=0.02, help="Gaussian pixel-noise standard deviation")
    p.add_argument("--prefix", default="scene", help="sample id prefix")
    _add_common(p, sigma=False)

    for name, text in (("pretrain", "pretrain each column on its own"),
                       ("train", "full two-stage training (or fine-tuning from --init)")):
        p = sub.add_parser(name, formatter_class=_Formatter, help=text)
        p.add_argument("data", help="dataset directory")
        p.add_argument("--out", required=True, help="checkpoint to write")
        p.add_argument("--log", metavar="CSV", help="training log to write")
        p.add_argument("--color", action="store_true", help="train on RGB instead of luminance")
        if name == "train":
            p.add_argument("--init", metavar="CKPT", help="checkpoint with pretrained columns")
            p.add_argument("--from-scratch", action="store_true", help="skip column pretraining")
            p.add_argument("--eval-data", metavar="DIR", help="dataset evaluated every --eval-every steps")
            p.add_argument("--curve", metavar="PNG", help="training-curve figure")
        _add_train_flags(p)
        _add_common(p)

    p = sub.add_parser("eval", formatter_class=_Formatter, help="count error of a model (or of saved maps) on a dataset",
                       description="Prints the report CSV: image_id,gt_count,pred_count rows, then MAE and MSE.")
    p.add_argument("data", help="dataset directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", metavar="CKPT", help="model to evaluate")
    src.add_argument("--predictions", metavar="DIR",
                     help="directory of predicted <id>.dmap (or <id>.density.dmap) maps to score instead of a model")
    p.add_argument("--report", metavar="DIR", help="write report.csv and figures here")
    p.add_argument("--export", metavar="DIR", help="write per-image density and probability maps here")
    p.add_argument("--color", action="store_true", help="model expects RGB input")
    _add_common(p)

    p = sub.add_parser("predict", formatter_class=_Formatter, help="density and probability maps for one image")
    p.add_argument("image", help="PGM/PPM image")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--png", action="store_true", help="also write an overlay figure")
    _add_common(p, sigma=False)

    p = sub.add_parser("grad-check", formatter_class=_Formatter, help="finite-difference gradient suite")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--size", type=int, default=32, help="input side for the end-to-end check")
    _add_common(p, sigma=False)
    return parser


def _pair(text, what, sep, cast=int):
    try:
        a, b = text.lower().split(sep)
        return cast(a), cast(b)
    except ValueError:
        raise UsageError(f"{what}: expected A{sep}B, got {text!r}") from None


def _train_config(args) -> TrainConfig:
    flags = {}
    for key in [k for _, k, _, _ in _TRAIN_FLAGS] + ["use_rd", "flip", "rescale", "seed", "threads", "sigma"]:
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
    overrides = list(args.overrides) + [f"{k}={v}" for k, v in flags.items()]
    return load_config(args.config, overrides)


def cmd_gen_density(args, cfg: TrainConfig) -> int:
    policy = cfg.sigma_policy
    os.makedirs(args.out, exist_ok=True)
    for path in args.annotations:
        base = os.path.splitext(path)[0]
        if args.size:
            size = _pair(args.size, "--size", "x")
        else:
            img = next((base + e for e in (".pgm", ".ppm") if os.path.exists(base + e)), None)
            if img is None:
                raise DataError(f"{path}: no sibling .pgm/.ppm image; pass --size HxW")
            size = formats.read_pnm(img).shape[:2]
        points = formats.read_points(path)
        ann = HeadAnnotations(points, size)
        p = policy
        if p.kind == "perspective":
            pmap = args.perspective or base + ".pmap"
            if not os.path.exists(pmap):
                raise DataError(f"{path}: --sigma persp needs a perspective map; {pmap} not found")
            from dataclasses import replace

            p = replace(p, perspective=formats.read_pmap(pmap))
        dmap = density_from_annotations(ann, p)
        if args.scale != 1:
            h, w = dmap.grid.shape
            if h % args.scale or w % args.scale:
                raise DataError(f"{path}: size {h}x{w} not divisible by {args.scale}")
            dmap = sum_pool_downsample(dmap, args.scale)
        out = os.path.join(args.out, formats.stem(path) + ".dmap")
        formats.write_dmap(out, dmap.grid, scale=dmap.scale)
        print(f"{out},{dmap.count!r}")
    return EXIT_OK


def cmd_synth(args, cfg: TrainConfig) -> int:
    try:
        config = SynthConfig(size=_pair(args.size, "--size", "x"), count_range=_pair(args.heads, "--heads", "-"),
                             radius_range=_pair(args.radius, "--radius", "-", float), noise=args.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    for s in synth_dataset(args.count, config, seed=cfg.seed, prefix=args.prefix):
        save_sample(s, args.out)
        print(f"{s.id},{s.count}")
    return EXIT_OK


def _write_log(args, log):
    if args.log:
        with open(args.log, "w") as fh:
            fh.write(log.to_csv())


def cmd_pretrain(args, cfg: TrainConfig) -> int:
    from .trainer import TrainLog, pretrain_all

    data = load_dataset(args.data, color=args.color)
    log = TrainLog()
    model = pretrain_all(data, cfg, log)
    save_checkpoint(model, args.out)
    _write_log(args, log)
    return EXIT_OK


def cmd_train(args, cfg: TrainConfig) -> int:
    from .trainer import train

    if args.init and args.from_scratch:
        raise UsageError("--init and --from-scratch are mutually exclusive")
    data = load_dataset(args.data, color=args.color)
    init = load_checkpoint(args.init) if args.init else None
    eval_set = load_dataset(args.eval_data, color=args.color) if args.eval_data else None
    model, log = train(data, cfg, init=init, from_scratch=args.from_scratch, checkpoint_path=args.out,
                       eval_set=eval_set)
    _write_log(args, log)
    if args.curve:
        from .plotting import training_curve

        training_curve(log, args.curve)
    return EXIT_OK


def _prediction_report(args, data, cfg):
    pairs, ids = [], []
    for s in data:
        s = attach_density(s, cfg.sigma_policy)
        cands = [os.path.join(args.predictions, s.id + e) for e in (".density.dmap", ".dmap")]
        path = next((c for c in cands if os.path.exists(c)), None)
        if path is None:
            raise DataError(f"{args.predictions}: no prediction for {s.id!r} (looked for {', '.join(cands)})")
        grid, scale = formats.read_dmap(path)
        h, w = s.size
        if grid.shape != (h // scale, w // scale):
            raise DataError(f"{path}: map {grid.shape} at scale {scale} does not match image {h}x{w}")
        # ground truth at the prediction's resolution, counted the same way
        truth = s.density if scale == 1 else sum_pool_downsample(s.density, scale)
        mask = s.roi.mask(scale) if s.roi is not None else None
        pred, gt = ((float((g * mask).sum()) if mask is not None else float(g.sum())) for g in (grid, truth.grid))
        pairs.append((gt, pred))
        ids.append(s.id)
    return mae_mse(pairs, ids)


def cmd_eval(args, cfg: TrainConfig) -> int:
    from .trainer import evaluate, predict_maps

    data = load_dataset(args.data, color=args.color)
    if args.predictions:
        report = _prediction_report(args, data, cfg)
        model = None
    else:
        model = load_checkpoint(args.checkpoint)
        report = evaluate(model, data, cfg, out_dir=args.export)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.report:
        from .plotting import count_scatter, probability_overlay

        os.makedirs(args.report, exist_ok=True)
        with open(os.path.join(args.report, "report.csv"), "w") as fh:
            fh.write(text)
        count_scatter(report, os.path.join(args.report, "counts.png"))
        if model is not None:
            s = data[0]
            _, maps = predict_maps(model, s.image)
            probability_overlay(s.image, maps[0], os.path.join(args.report, f"{s.id}.overlay.png"),
                                points=s.annotations.points, title=f"{s.id}: probability map")
    return EXIT_OK


def cmd_predict(args, cfg: TrainConfig) -> int:
    from .trainer import export_maps, predict_maps

    model = load_checkpoint(args.checkpoint)
    img = formats.read_pnm(args.image)
    if img.ndim == 3:
        img = np.moveaxis(img, -1, 0) if model.in_channels == 3 else formats.luminance(img)
    elif model.in_channels == 3:
        img = np.repeat(img[None], 3, axis=0)
    h, w = img.shape[-2:]
    img = np.ascontiguousarray(img[..., : h - h % 4, : w - w % 4])
    if img.shape[-1] == 0 or img.shape[-2] == 0:
        raise DataError(f"{args.image}: image smaller than 4 pixels on a side")
    density, maps = predict_maps(model, img)
    sid = formats.stem(args.image)
    export_maps(args.out, sid, density, maps)
    if args.png:
        from .plotting import probability_overlay

        probability_overlay(img, maps[0], os.path.join(args.out, sid + ".overlay.png"))
    print(f"{sid},{float(density.sum())!r}")
    return EXIT_OK


def cmd_grad_check(args, cfg: TrainConfig) -> int:
    if args.size < 16 or args.size % 4:
        raise UsageError("--size must be a multiple of 4 and at least 16")
    try:
        results = run_suite(h=args.h, seed=cfg.seed, size=args.size)
    except ValueError as exc:
        raise UsageError(f"--h: {exc}") from None
    print("check,max_rel_error,tolerance,status")
    for r in results:
        print(f"{r.name},{r.error:.3e},{r.tolerance:.0e},{'ok' if r.ok else 'FAIL'}")
    if not all(r.ok for r in results):
        raise NumericalError("gradient check failed: " + ", ".join(r.name for r in results if not r.ok))
    return EXIT_OK


COMMANDS = {
    "gen-density": cmd_gen_density,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "grad-check": cmd_grad_check,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _train_config(args)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"amcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"amcnn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, AmcnnError, ValueError, OSError) as exc:
        print(f"amcnn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

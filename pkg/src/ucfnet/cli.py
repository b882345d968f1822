"""``ucf`` command line: synth, train, infer, eval, analyze and arith.

Every subcommand prints its resolved settings as ``key=value`` lines before
doing any work.  For ``train`` the printed block is itself a valid config
file, so piping it back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import kvconfig, metrics, netpbm, ops, synth, upsampling
from .checkpoint import CheckpointError, load_checkpoint, network_from_checkpoint
from .model import VARIANTS, NetworkConfig, build_network, multiscale_ensemble
from .training import TrainConfig, dataset_mean, preprocess, train

log = logging.getLogger("ucfnet")

RUN_KEYS = frozenset({"data", "out", "log"})


class UsageError(ValueError):
    pass


def default_config_text() -> str:
    return resources.files("ucfnet").joinpath("default.cfg").read_text()


def _emit(values: dict) -> None:
    for key, value in values.items():
        print(f"{key}={kvconfig.fmt(value)}")
    sys.stdout.flush()


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads with ``UCF_THREADS`` (unset or 0 means no cap)."""
    raw = os.environ.get("UCF_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"UCF_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("UCF_THREADS must be >= 0")
    if n == 0:
        yield 0
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield n


def _scales(text: str) -> list[float]:
    try:
        values = kvconfig.as_floats(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("scales must be positive")
    return values


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    spec = synth.SynthSpec(count=args.count, side=args.side, seed=args.seed)
    _emit({"command": "synth", "count": spec.count, "side": spec.side, "seed": spec.seed,
           "kinds": list(spec.kinds), "min_fraction": spec.min_fraction, "max_fraction": spec.max_fraction,
           "contrast": spec.contrast, "noise": spec.noise, "out": args.out})
    synth.write_dataset(synth.generate(spec), args.out)
    return 0


def resolve_train_settings(args):
    """Merge default config, ``--config`` file and flags (flags win)."""
    values = kvconfig.parse(default_config_text())
    if args.config:
        user = kvconfig.load(args.config)
        unknown = set(user) - NetworkConfig.KEYS - TrainConfig.KEYS - RUN_KEYS
        if unknown:
            raise kvconfig.ConfigError(f"unknown config key {sorted(unknown)[0]!r} in {args.config}")
        values.update(user)
    for key, flag in (("data", args.data), ("out", args.out), ("log", args.log)):
        if flag is not None:
            values[key] = flag
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.iters is not None:
        values["iterations"] = str(args.iters)
    for key in ("data", "out"):
        if not values.get(key):
            raise UsageError(f"train needs --{key} (or a '{key}' entry in the config file)")
    values.setdefault("log", str(Path(values["out"]).with_suffix(".loss.csv")))
    return values


def cmd_train(args) -> int:
    values = resolve_train_settings(args)
    dataset = synth.read_dataset(values["data"])
    if not dataset:
        raise ValueError(f"dataset {values['data']} is empty")
    if values.get("input_mean", "auto") == "auto":
        values["input_mean"] = kvconfig.fmt(list(dataset_mean(dataset)))
    net_values = {k: v for k, v in values.items() if k in NetworkConfig.KEYS}
    net_cfg = NetworkConfig.from_dict(net_values)
    if args.variant:
        net_cfg = net_cfg.with_variant(args.variant)
    train_cfg = TrainConfig.from_dict(values)
    effective = {**net_cfg.to_dict(), **train_cfg.to_dict(),
                 "data": values["data"], "out": values["out"], "log": values["log"]}
    flags = (net_cfg.use_dropout, net_cfg.use_rdropout, net_cfg.use_restricted_deconv, net_cfg.use_interp)
    preset = next((name for name, v in VARIANTS.items() if v == flags), "custom")
    print(f"# variant={preset}")
    _emit(effective)
    net = build_network(net_cfg, train_cfg.seed)
    result = train(net, dataset, train_cfg, checkpoint_path=values["out"], log_path=values["log"])
    last = result.log[-1][2] if result.log else float("nan")
    print(f"final_loss={last!r}")
    return 0


def load_rgb(path) -> np.ndarray:
    raster = netpbm.read_image(path)
    if raster.ndim == 2:
        raster = np.repeat(raster[..., None], 3, axis=2)
    return raster


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    net = network_from_checkpoint(ckpt)
    image = load_rgb(args.image)
    if image.shape[2] != net.config.in_channels:
        raise ValueError(f"image has {image.shape[2]} channels, network expects {net.config.in_channels}")
    _emit({"command": "infer", "ckpt": args.ckpt, "image": args.image, "out": args.out,
           "scales": args.scales, "height": image.shape[0], "width": image.shape[1],
           "divisor": net.config.divisor})
    x = preprocess(image, None, net.config.input_mean)
    sal = multiscale_ensemble(net, x, args.scales)[0]
    netpbm.write_image(args.out, netpbm.saliency_to_raster(sal))
    return 0


def cmd_eval(args) -> int:
    if not 0 < args.beta2:
        raise UsageError("--beta2 must be positive")
    _emit({"command": "eval", "pred": args.pred, "gt": args.gt, "out": args.out, "beta2": args.beta2})
    report = metrics.evaluate_dir(args.pred, args.gt, args.beta2)
    metrics.write_report(report, args.out)
    print(f"mean_fbeta={report.mean_fbeta!r}")
    print(f"mean_mae={report.mean_mae!r}")
    print(f"n_images={len(report.images)}")
    if report.excluded:
        print(f"# excluded from the PR curve (empty ground truth): {','.join(report.excluded)}")
    return 0


def cmd_arith(args) -> int:
    _emit({"command": "arith", "n": args.n, "k": args.k, "s": args.s, "p": args.p, "t": args.t})
    report = upsampling.arith_report(args.n, args.k, args.s, args.p, args.t)
    try:
        conv_out = ops.conv_output_side(args.n, args.k, args.s, args.p)
    except ValueError:
        conv_out = None
    print(f"conv_out={conv_out if conv_out is not None else 'undefined'}")
    for line in report.lines():
        print(line)
    if conv_out is not None:
        # deconvolving the conv output with the same geometry
        print(f"roundtrip={ops.deconv_output_side(conv_out, args.k, args.s, args.p, args.t)}")
    return 0


def cmd_analyze(args) -> int:
    mode = upsampling.canonical_mode(args.mode)
    if mode in ("deconv_restricted", "hybrid") and args.k % args.s:
        raise ValueError(f"{mode} needs k to be a multiple of s (k={args.k}, s={args.s})")
    _emit({"command": "analyze", "mode": mode, "k": args.k, "s": args.s, "size": args.size,
           "trials": args.trials, "seed": args.seed, "out": args.out})
    rows = upsampling.upsampler_sweep([mode], [(args.k, args.s)], args.trials, args.seed, args.size)
    Path(args.out).write_text(upsampling.sweep_csv(rows))
    mean = upsampling.mean_scores(rows)[(mode, args.k, args.s)]
    print(f"mean_score={mean!r}")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic saliency dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("--config", help="flat key=value config; defaults to the bundled toy config")
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation flag preset; overrides the config flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write a saliency map for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=_scales, default=[1.0])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score saliency maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta2", type=float, default=metrics.BETA2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("arith", help="convolution / deconvolution size arithmetic")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--p", type=int, default=0)
    p.add_argument("--t", type=int, default=0)
    p.set_defaults(func=cmd_arith)

    p = sub.add_parser("analyze", help="checkerboard scores of an upsampling block")
    p.add_argument("--mode", required=True, help=f"one of {', '.join(upsampling.MODES)} or naive/restricted/interp")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with thread_limit() as threads:
            if threads:
                print(f"# threads={threads}")
            return args.func(args)
    except UsageError as exc:
        print(f"ucf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, CheckpointError, FloatingPointError) as exc:
        print(f"ucf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

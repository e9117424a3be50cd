"""Command-line interface.

Input faces are assumed to be aligned already (eyes and mouth at fixed
positions); no detection or alignment is done here.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .dataset import load_pairs, prepare_dataset
from .degradation import DegradationOperator, back_project, classical_upsample, degrade
from .gradcheck import SquaredLoss, grad_check
from .imageio import image_read, image_write
from .inference import upsample_color, upsample_gray
from .layers import layer_seed
from .metrics import evaluate
from .models import (
    ModelDescriptor,
    build_discriminator,
    build_gln,
    build_ln,
    build_model,
    receptive_field,
)
from .tensor import make_rng, precision
from .training import AdvConfig, TrainConfig, TrainingError, finetune_adversarial, train_reconstruction

log = logging.getLogger("glnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
PEAK = {"0-1": 1.0, "0-255": 255.0}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def read_config(path: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--scale", type=int, choices=(4, 8), default=None, help="upsampling factor d (default 4)")
    g.add_argument("--ln", type=int, choices=(4, 6, 8), default=8, help="local network depth")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--checkpoint", help="model checkpoint (.glnc)")
    g.add_argument("--config", help="key=value file; command-line flags win")
    g.add_argument("--pixel-scale", choices=("0-1", "0-255"), default="0-1")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> tuple[Parser, dict[str, argparse.ArgumentParser]]:
    common = _common()
    parser = Parser(prog="glnet", description="Global-local face upsampling networks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True
    subs = {}

    def add(name, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        subs[name] = sp
        return sp

    p = add("prepare", "Degrade aligned 128x128 faces into an identity-disjoint paired dataset.")
    p.add_argument("source", help="directory of aligned 128x128 .pgm/.png faces")
    p.add_argument("output", help="dataset directory to create")
    p.add_argument("--sigma", type=float, help="blur sigma (default 1.2 for d=4, 2.4 for d=8)")
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = add("train", "Reconstruction training; writes --checkpoint.")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--model", choices=("gln", "gn_only", "ln_only"), default="gln")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-5 at 0-1 scale)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--log", help="loss curve TSV")

    p = add("finetune", "Adversarial fine-tuning of a reconstruction-trained --checkpoint.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lambda-rule", choices=("explicit", "tenth"), default=None)
    p.add_argument("--switches", type=int, default=10000)
    p.add_argument("--d-steps", type=int, default=10)
    p.add_argument("--g-steps", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--d-lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--disc-out", help="also save the discriminator here")
    p.add_argument("--log")

    p = add("upsample", "Upsample one image, or every image in a directory.")
    p.add_argument("input", help="low-resolution image or directory")
    p.add_argument("output", help="output image, or directory when the input is one")
    p.add_argument("--color", action="store_true", help="RGB input: Y through the model, U/V bicubic")

    p = add("evaluate", "PSNR/SSIM/WPSNR of --checkpoint and the nearest/bicubic baselines.")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--csv", help="write per-image rows here")

    p = add("gradcheck", "Finite-difference check of a toy GLN in float64.")
    p.add_argument("--hr-size", type=int, default=64)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)

    add("rf", "Receptive field of the local network selected by --ln.")

    p = add("degrade", "Gaussian blur then decimation by --scale.")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sigma", type=float)

    p = add("backproject", "Iterative back-projection against a low-resolution observation.")
    p.add_argument("input", help="low-resolution observation")
    p.add_argument("output")
    p.add_argument("--estimate", help="initial high-resolution estimate (default bicubic)")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--sigma", type=float)
    return parser, subs


def _convert(action: argparse.Action, key: str, value: str):
    if action.nargs == 0:
        lowered = value.lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no"):
            raise UsageError(f"config: {key} expects a boolean, got {value!r}")
        return lowered in ("1", "true", "yes")
    try:
        converted = action.type(value) if action.type else value
    except (TypeError, ValueError):
        raise UsageError(f"config: bad value {value!r} for {key}") from None
    if action.choices is not None and converted not in action.choices:
        raise UsageError(f"config: {key} must be one of {list(action.choices)}")
    return converted


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        sp = subs[args.command]
        actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        defaults = {}
        for key, value in values.items():
            if key not in actions:
                raise UsageError(f"config: unknown key {key!r} for '{args.command}'")
            defaults[key] = _convert(actions[key], key, value)
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# commands


def _factor(args, default=4) -> int:
    return args.scale if args.scale is not None else default


def _load_model(args, expect_factor=True):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    try:
        model = ckpt.load(args.checkpoint)
    except OSError as exc:
        raise RuntimeFailure(f"cannot read checkpoint: {exc}") from None
    d = model.descriptor
    if expect_factor and args.scale is not None and d.factor != args.scale:
        raise RuntimeFailure(
            f"checkpoint {args.checkpoint} was built for scale {d.factor} ({d.name}, LN{d.depth}), not --scale {args.scale}"
        )
    return model


def cmd_prepare(args):
    m = prepare_dataset(args.source, args.output, _factor(args), args.sigma, args.test_fraction, args.seed,
                        args.pixel_scale)
    print(f"{len(m.split('train'))} train / {len(m.split('test'))} test images "
          f"(d={m.factor}, sigma={m.sigma}, phase={m.phase}) -> {args.output}")


def cmd_train(args):
    if not args.checkpoint:
        raise UsageError("train needs --checkpoint (output path)")
    pairs = load_pairs(args.data, "train", args.pixel_scale)
    d = _factor(args)
    hr_size = pairs.hr.shape[-1]
    if pairs.lr.shape[-1] * d != hr_size:
        raise RuntimeFailure(f"dataset is {pairs.lr.shape[-1]}->{hr_size}, not a {d}x mapping")
    if args.resume:
        model = ckpt.load(args.resume)
    else:
        depth = args.ln if args.model != "gn_only" else 0
        model = build_model(ModelDescriptor(args.model, d, depth, args.seed, hr_size))
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
                      iterations=args.iterations, seed=args.seed, pixel_scale=args.pixel_scale,
                      checkpoint_every=args.checkpoint_every)

    def on_checkpoint(m, it):
        ckpt.save(args.checkpoint, m, optimizer_state=True)
        log.info("checkpoint at iteration %d", it)

    with _open_log(args.log) as fh:
        result = train_reconstruction(model, pairs, cfg, fh, on_checkpoint)
    ckpt.save(args.checkpoint, result.model, optimizer_state=True)
    print(f"initial loss {result.losses[0]:.6g}, final loss {result.losses[-1]:.6g} -> {args.checkpoint}")


def cmd_finetune(args):
    model = _load_model(args)
    pairs = load_pairs(args.data, "train", args.pixel_scale)
    disc = build_discriminator(layer_seed(args.seed, 2), model.descriptor.hr_size)
    rule = "tenth_of_mse" if args.lambda_rule == "tenth" else "explicit"
    if rule == "explicit" and args.lam is None:
        raise UsageError("finetune needs --lambda or --lambda-rule tenth")
    adv = AdvConfig(lam=args.lam or 0.0, d_steps=args.d_steps, g_steps=args.g_steps, switches=args.switches,
                    lambda_rule=rule, d_learning_rate=args.d_lr)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
                      seed=args.seed, pixel_scale=args.pixel_scale)
    model.reset_momentum()
    with _open_log(args.log) as fh:
        model, disc, hist = finetune_adversarial(model, disc, pairs, cfg, adv, fh)
    ckpt.save(args.out, model, optimizer_state=True)
    if args.disc_out:
        ckpt.save(args.disc_out, disc)
    print(f"lambda {hist.lam:.6g}; final L_MS {hist.ms[-1]:.6g}, L_D {hist.d_loss[-1]:.6g}, "
          f"mean D(G(x)) {hist.mean_d[-1]:.4f} -> {args.out}")


def _upsample_file(model, src, dst, args):
    peak = PEAK[args.pixel_scale]
    image = image_read(src, args.pixel_scale)
    if args.color:
        if image.shape[1] != 3:
            raise RuntimeFailure(f"{src}: --color needs an RGB image")
        out = upsample_color(model, image, model.descriptor.factor, peak)
    else:
        if image.shape[1] != 1:
            raise RuntimeFailure(f"{src}: expected a grayscale image (use --color for RGB)")
        out = upsample_gray(model, image, peak)
    image_write(dst, out, args.pixel_scale)


def cmd_upsample(args):
    model = _load_model(args)
    if os.path.isdir(args.input):
        os.makedirs(args.output, exist_ok=True)
        names = sorted(n for n in os.listdir(args.input) if n.lower().endswith((".pgm", ".png")))
        for name in names:
            stem, ext = os.path.splitext(name)
            out_ext = ".png" if args.color else ext
            _upsample_file(model, os.path.join(args.input, name), os.path.join(args.output, stem + out_ext), args)
        print(f"upsampled {len(names)} images -> {args.output}")
    else:
        _upsample_file(model, args.input, args.output, args)


def cmd_evaluate(args):
    model = _load_model(args)
    pairs = load_pairs(args.data, args.split, args.pixel_scale)
    report = evaluate(model, pairs, model.descriptor.factor, PEAK[args.pixel_scale], dataset_tag=f"{args.data}:{args.split}")
    print(report.table(), end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())


def cmd_gradcheck(args):
    d = _factor(args, 8)
    if args.hr_size % d:
        raise UsageError("--hr-size must be divisible by --scale")
    with precision(np.float64):
        model = build_gln(d, args.ln, args.seed, args.hr_size)
    rng = make_rng(args.seed)
    x = rng.random((2,) + model.input_shape)
    target = rng.random((2,) + model.output_shape)
    result = grad_check(model, x, SquaredLoss(target), h=args.step, samples=args.samples, seed=args.seed)
    status = "ok" if result.max_rel_error <= args.tol else "FAILED"
    print(f"{model.name} d={d} LN{args.ln} {args.hr_size // d}->{args.hr_size}: max relative error "
          f"{result.max_rel_error:.3e} over {result.checked} entries (worst {result.worst}) {status}")
    if status != "ok":
        raise RuntimeFailure(f"gradient check exceeded tolerance {args.tol:g}")


def cmd_rf(args):
    print(receptive_field(build_ln(args.ln, in_channels=1, seed=args.seed, hr_size=16)))


def _operator(args):
    return DegradationOperator.for_factor(_factor(args), args.sigma)


def cmd_degrade(args):
    image = image_read(args.input, args.pixel_scale)
    image_write(args.output, degrade(image, _operator(args)), args.pixel_scale)


def cmd_backproject(args):
    op = _operator(args)
    lr = image_read(args.input, args.pixel_scale)
    if args.estimate:
        estimate = image_read(args.estimate, args.pixel_scale)
    else:
        estimate = classical_upsample(lr, op.factor, "bicubic")
    out = back_project(estimate, lr, op, iters=args.iters)
    image_write(args.output, np.clip(out, 0, PEAK[args.pixel_scale]), args.pixel_scale)


class _open_log:
    def __init__(self, path):
        self.path = path
        self.fh = None

    def __enter__(self):
        if self.path:
            self.fh = open(self.path, "w", encoding="utf-8")
        return self.fh

    def __exit__(self, *exc):
        if self.fh:
            self.fh.close()


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "upsample": cmd_upsample,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "rf": cmd_rf,
    "degrade": cmd_degrade,
    "backproject": cmd_backproject,
}

RUNTIME_ERRORS = (RuntimeFailure, OSError, ValueError, TrainingError, FloatingPointError, ArithmeticError)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"glnet {args.command}: {exc}\n")
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        sys.stderr.write(f"glnet {args.command}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``latis`` command line: train, sr, eval, gradcheck, info.

Exit codes: 0 success, 1 usage/data error, 2 flag parse error,
3 numeric divergence, 4 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, layers
from .data import Dataset, list_images, load_image, make_pair, save_image
from .errors import ConfigError, DivergenceError, LatisError
from .gradcheck import OPS, run_suite
from .layers import ModelConfig
from .losses import LossSchedule
from .metrics import bicubic_resize, psnr, ssim
from .tensor import Tensor, no_grad
from .training import DEFAULT_BATCH, DEFAULT_LR, DEFAULT_STEPS_PER_EPOCH, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("latis")

EXIT_OK, EXIT_DATA, EXIT_PARSE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class CliError(Exception):
    """A usage or data problem reported with exit code 1."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = _nonneg_float(text)
    if value == 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _model_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="JSON file with ModelConfig fields (flags override it)")
    g.add_argument("--num-lgfb", type=_positive_int, help="number of LGFB blocks (default 3)")
    g.add_argument("--no-shuffle", action="store_true", help="disable channel shuffle in CSConv")
    g.add_argument("--no-cbam", action="store_true", help="drop the CBAM attention block")
    g.add_argument("--no-layernorm", action="store_true", help="drop layer norm before the lambda layer")
    g.add_argument("--no-residual", action="store_true", help="drop the global bicubic residual")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latis", description="Lightweight thermal image super-resolution.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    model = _model_flags()

    t = sub.add_parser("train", parents=[model], help="train a model on a directory or manifest of HR images")
    t.add_argument("--data", required=True, type=Path, help="HR image directory or manifest file")
    t.add_argument("--scale", required=True, type=int, choices=(2, 3, 4))
    t.add_argument("--out", required=True, type=Path, help="checkpoint to write")
    t.add_argument("--epochs", type=_nonneg_int, default=200)
    t.add_argument("--batch", type=_positive_int, help="batch size (default 64/48/32 for x2/x3/x4)")
    t.add_argument("--lr", type=_positive_float, default=DEFAULT_LR)
    t.add_argument("--seed", type=_nonneg_int, default=0)
    t.add_argument("--steps-per-epoch", type=_positive_int, default=DEFAULT_STEPS_PER_EPOCH)
    t.add_argument("--crop", type=_nonneg_int, help="HR crop side (default 64/96/128; 0 = whole images)")
    t.add_argument("--lambda-p", type=_nonneg_float, default=0.125, help="histogram loss weight")
    t.add_argument("--n-epochs", type=_nonneg_int, default=5, help="epochs that use the histogram loss")
    t.add_argument("--no-emd", action="store_true", help="train with the content loss only")
    t.add_argument("--log", type=Path, help="append per-step lines epoch,step,loss_c,loss_p,lr here")
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")
    t.add_argument("--val", type=Path, help="HR directory for per-epoch validation PSNR")

    s = sub.add_parser("sr", help="super-resolve one image")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--input", required=True, type=Path)
    s.add_argument("--output", required=True, type=Path)
    s.add_argument("--scale", type=int, choices=(2, 3, 4), help="expected scale; must match the checkpoint")
    s.add_argument("--bits", type=int, choices=(8, 16), default=8, help="output bit depth")

    e = sub.add_parser("eval", help="PSNR/SSIM of a model (or bicubic) on HR images, as CSV")
    e.add_argument("--hr", required=True, type=Path, help="HR image directory or manifest")
    e.add_argument("--scale", required=True, type=int, choices=(2, 3, 4))
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path)
    src.add_argument("--baseline", choices=("bicubic",))
    e.add_argument("--shave", type=_nonneg_int, default=0, help="border pixels excluded from metrics")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--op", action="append", choices=OPS, metavar="OP",
                   help=f"restrict to an op (repeatable): {', '.join(OPS)}")
    g.add_argument("--seed", type=_nonneg_int, default=0)

    i = sub.add_parser("info", parents=[model], help="parameter count and FLOPs at 80x64 input")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--scale", type=int, choices=(2, 3, 4))
    src.add_argument("--model", type=Path, help="read the config from a checkpoint")
    return parser


def model_config(args) -> ModelConfig:
    """Built-in defaults < ``--config`` file < flags."""
    fields = {}
    if args.config is not None:
        try:
            fields = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(fields, dict):
            raise CliError(f"{args.config}: expected a JSON object of ModelConfig fields")
    if getattr(args, "scale", None) is not None:
        fields["scale"] = args.scale
    if args.num_lgfb is not None:
        fields["num_lgfb"] = args.num_lgfb
    for flag, field in (("no_shuffle", "use_channel_shuffle"), ("no_cbam", "use_cbam"),
                        ("no_layernorm", "use_layer_norm"), ("no_residual", "use_bicubic_residual")):
        if getattr(args, flag):
            fields[field] = False
    try:
        return ModelConfig.from_dict({**ModelConfig().to_dict(), **fields})
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid model config: {exc}") from exc


def _super_resolve(params, config: ModelConfig, lr: np.ndarray) -> np.ndarray:
    with no_grad():
        sr = layers.latis_forward(Tensor(lr[None, None].astype(np.float32), dtype=np.float32), params, config)
    return np.clip(sr.data[0, 0].astype(np.float64), 0.0, 1.0)


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


def cmd_train(args) -> int:
    config = model_config(args)
    schedule = LossSchedule(0.0 if args.no_emd else args.lambda_p, args.n_epochs)
    if not args.data.exists():
        raise CliError(f"training data not found: {args.data}")
    paths = list_images(args.data)
    if not paths:
        raise CliError(f"no .pgm/.png images in {args.data}")
    ds = Dataset.from_paths(paths, args.scale, crop=args.crop, seed=args.seed)
    val = Dataset.from_source(args.val, args.scale, crop=0) if args.val else None
    resume = load_checkpoint(args.resume, expected_config=config) if args.resume else None
    batch = args.batch or DEFAULT_BATCH[args.scale]
    log.info("training x%d on %d images: batch %d, %d epochs x %d steps, config %s",
             args.scale, len(ds), batch, args.epochs, args.steps_per_epoch, config.hash()[:12])

    def progress(rec):
        if rec.step % 10 == 0:
            log.info("epoch %d step %d: L_C %.6f L_P %s", rec.epoch, rec.step, rec.loss_c,
                     "skipped" if rec.loss_p is None else f"{rec.loss_p:.6f}")

    log_file = open(args.log, "a") if args.log else None
    try:
        result = fit(ds, config, schedule, epochs=args.epochs, steps_per_epoch=args.steps_per_epoch,
                     seed=args.seed, batch=batch, lr=args.lr, resume=resume, val_ds=val,
                     log_file=log_file, on_step=progress)
    finally:
        if log_file is not None:
            log_file.close()
    save_checkpoint(args.out, result.checkpoint)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_sr(args) -> int:
    ckpt = load_checkpoint(args.model)
    if args.scale is not None and args.scale != ckpt.config.scale:
        raise CliError(f"checkpoint is x{ckpt.config.scale} but --scale {args.scale} was requested")
    lr = load_image(args.input)
    sr = _super_resolve(ckpt.tensors(np.float32), ckpt.config, lr)
    save_image(args.output, sr, bits=args.bits)
    log.info("%s %dx%d -> %s %dx%d", args.input, lr.shape[1], lr.shape[0], args.output, sr.shape[1], sr.shape[0])
    return EXIT_OK


def cmd_eval(args, out=None) -> int:
    out = out or sys.stdout
    if not args.hr.exists():
        raise CliError(f"HR data not found: {args.hr}")
    paths = list_images(args.hr)
    if not paths:
        raise CliError(f"no .pgm/.png images in {args.hr}")
    if args.model is not None:
        ckpt = load_checkpoint(args.model)
        if ckpt.config.scale != args.scale:
            raise CliError(f"checkpoint is x{ckpt.config.scale} but --scale {args.scale} was requested")
        params = ckpt.tensors(np.float32)
    rows = []
    out.write("file,psnr_db,ssim\n")
    for path in paths:
        lr, hr = make_pair(load_image(path), args.scale)
        if args.model is not None:
            sr = _super_resolve(params, ckpt.config, lr)
        else:
            sr = bicubic_resize(lr, *hr.shape)
        p, q = psnr(sr, hr, shave=args.shave), ssim(sr, hr, shave=args.shave)
        rows.append((p, q))
        out.write(f"{Path(path).name},{_fmt(p)},{_fmt(q)}\n")
    out.write(f"mean,{_fmt(float(np.mean([r[0] for r in rows])))},{_fmt(float(np.mean([r[1] for r in rows])))}\n")
    return EXIT_OK


def cmd_gradcheck(args, out=None) -> int:
    out = out or sys.stdout
    out.write("op,max_rel_error,threshold,oracle_abs_error,seconds,status\n")

    def emit(res):
        out.write(res.row() + "\n")
        out.flush()

    results = run_suite(args.op, seed=args.seed, on_result=emit)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"latis: gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_info(args, out=None) -> int:
    out = out or sys.stdout
    if args.model is not None:
        config = load_checkpoint(args.model).config
    else:
        config = model_config(args)
    info = layers.model_info(config)
    h, w = info["input"]
    out.write("key,value\n")
    for key, value in (("scale", config.scale), ("input", f"{h}x{w}"), ("params", info["param_count"]),
                       ("flops", info["flops"]), ("gflops", f"{info['flops'] / 1e9:.4f}"),
                       ("macs", info["macs"]), ("conv2d_macs", info["conv2d_macs"]),
                       ("conv3d_lambda_macs", info["conv3d_lambda_macs"]),
                       ("contract_macs", info["contract_macs"]), ("config_hash", config.hash())):
        out.write(f"{key},{value}\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sr": cmd_sr, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "info": cmd_info}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for bad flags
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get("LATIS_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"latis: LATIS_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_DATA
    try:
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"latis: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, LatisError, OSError) as exc:
        print(f"latis: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""``cald`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 internal
invariant failure.  Diagnostics are a single line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import cacd
from . import evaluation as ev
from . import inference as inf
from .entropy.rangecoder import RangeCoderError
from .images import ImageError, atomic_write_bytes, image_format, read_image, write_image
from .metrics import psnr
from .model import LAMBDA_REGISTRY, CheckpointError, CodecModel, load_model
from .training import TrainingDiverged, load_config, train

MODEL_DIR_ENV = "CALD_MODEL_DIR"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------------

def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {path!r} does not exist")
    return p


def _output_path(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise DataError(f"output directory {str(parent)!r} does not exist")
    return p


def _model_dir(arg: str | None) -> Path:
    d = arg or os.environ.get(MODEL_DIR_ENV)
    if not d:
        raise UsageError(f"no model given and ${MODEL_DIR_ENV} is not set")
    return Path(d)


def _resolve_model(model_ref: str | None, lambda_index: int | None = None) -> CodecModel:
    """A checkpoint path, a lambda looked up in the model directory, or (for decode) the header's lambda."""
    if model_ref and Path(model_ref).is_file():
        return load_model(model_ref)
    if model_ref is None and lambda_index is not None:
        if lambda_index >= len(LAMBDA_REGISTRY):
            raise DataError(f"stream lambda index {lambda_index} is not in the registry; pass --model")
        model_ref = str(LAMBDA_REGISTRY[lambda_index])
    if model_ref is None:
        raise UsageError("--model is required")
    try:
        lam = float(model_ref)
    except ValueError:
        raise DataError(f"model checkpoint {model_ref!r} does not exist") from None
    for found, path in ev.discover_models(_model_dir(None)):
        if found == lam:
            return load_model(path)
    raise DataError(f"no checkpoint for lambda {model_ref} in ${MODEL_DIR_ENV}")


def _fmt(v: float) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6g}"


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(_existing_file(args.config, "config"))
    try:
        result = train(cfg, stop_after=args.stop_after)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_encode(args) -> int:
    src = _existing_file(args.inp, "input image")
    out = _output_path(args.out)
    model = _resolve_model(args.model)
    x = read_image(src)
    res = bs.encode_image(x, model, opts=bs.EncodeOptions(cacd=not args.no_cacd, levels=args.levels))
    atomic_write_bytes(out, res.data)
    print(f"bytes={len(res.data)} bpp={res.bpp:.6f} psnr={res.psnr:.4f} hash={res.recon_hash}")
    return EXIT_OK


def cmd_decode(args) -> int:
    src = _existing_file(args.inp, "bitstream")
    out = _output_path(args.out)
    image_format(out)
    ref = read_image(_existing_file(args.ref, "reference image")) if args.ref else None
    data = src.read_bytes()
    header = bs.Header.unpack(data)
    model = _resolve_model(args.model, header.lambda_index)
    res = bs.decode_image(data, model)
    write_image(out, res.x_hat)
    line = f"width={header.width} height={header.height} bpp={8 * len(data) / (header.width * header.height):.6f} hash={res.recon_hash}"
    if ref is not None:
        line += f" psnr={psnr(ref, res.x_hat):.4f}"
    print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    model_dir = _model_dir(args.models)
    out = _output_path(args.out)
    curve_out = _output_path(args.curve_out) if args.curve_out else out.with_name(out.stem + "_curve.csv")
    opts = ev.EvalOptions(
        cacd=not args.no_cacd, levels=args.levels, ablate_cacd=args.ablate_cacd, ablate_caft=args.ablate_caft, jobs=args.jobs
    )
    result = ev.eval_run(model_dir, args.images, opts)
    ev.write_per_image_csv(out, result.rows)
    ev.write_curve_csv(curve_out, result.per_model)
    for m in result.per_model:
        print(f"lambda={m['lambda']:g} bpp={m['mean_bpp']:.6f} psnr={m['mean_psnr']:.4f}")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    anchor = ev.read_curve_csv(_existing_file(args.anchor, "anchor curve"), args.anchor)
    test = ev.read_curve_csv(_existing_file(args.test, "test curve"), args.test)
    out = _output_path(args.out) if args.out else None
    value = ev.bdbr(anchor, test)
    if out:
        ev.write_bdbr_csv(out, args.anchor, args.test, value)
    print(f"bdbr={value:.4f}%")
    return EXIT_OK


def allocation_image(alloc: np.ndarray, k: int, scale: int = 1) -> np.ndarray:
    """Gray map of an allocation: widest level white, narrowest black."""
    gray = np.rint(255.0 * (k - 1 - alloc) / max(k - 1, 1)).astype(np.uint8)
    return np.kron(gray, np.ones((scale, scale), np.uint8)) if scale > 1 else gray


def write_pgm(path, gray: np.ndarray):
    h, w = gray.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, np.uint8).tobytes())


def write_eta_csv(path, eta: np.ndarray):
    rows = [{"row": i, "col": j, "eta": _fmt(float(eta[i, j]))} for i in range(eta.shape[0]) for j in range(eta.shape[1])]
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["row", "col", "eta"])
            w.writeheader()
            w.writerows(rows)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def cmd_inspect(args) -> int:
    src = _existing_file(args.inp, "input image")
    alloc_out = _output_path(args.alloc_out) if args.alloc_out else None
    eta_out = _output_path(args.eta_out) if args.eta_out else None
    if not (alloc_out or eta_out):
        raise UsageError("inspect needs --alloc-out and/or --eta-out")
    model = _resolve_model(args.model)
    high = _resolve_model(args.eta_high) if args.eta_high else None
    xp = inf.pad_image(read_image(src))
    levels = model.levels if args.levels is None else model.levels.truncated(args.levels)
    if alloc_out:
        if not model.config.masking or levels.k < 2:
            raise DataError("allocation maps need a multi-level model with N == M")
        sel = cacd.select_allocation(xp, model, levels)
        write_pgm(alloc_out, allocation_image(sel.allocation, levels.k, args.scale))
        counts = np.bincount(sel.allocation.ravel(), minlength=levels.k)
        print("levels " + " ".join(f"{w}ch={c}" for w, c in zip(levels.widths, counts)))
    if eta_out:
        eta = cacd.eta_map(xp, model, high)
        write_eta_csv(eta_out, eta)
        print(f"eta blocks={eta.size} mean={_fmt(float(np.nanmean(eta))) if np.isfinite(eta).any() else 'nan'}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cald", description="Content-adaptive learned image codec.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the training schedule from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--stop-after", type=int, default=None, help="stop after this many global steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress an image")
    e.add_argument("--model", help=f"checkpoint path or lambda looked up in ${MODEL_DIR_ENV}")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--no-cacd", action="store_true", help="code every location at full width")
    e.add_argument("--levels", type=int, default=None, help="use only the first k quality levels")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct an image from a bitstream")
    d.add_argument("--model", help="checkpoint; defaults to the stream's lambda in the model directory")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--ref", help="original image; prints PSNR")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="RD evaluation of a model directory on an image directory")
    v.add_argument("--models", help=f"directory of <lambda>.ckpt files (default ${MODEL_DIR_ENV})")
    v.add_argument("--images", required=True)
    v.add_argument("--out", required=True, help="per-image CSV")
    v.add_argument("--curve-out", help="per-model CSV (default <out>_curve.csv)")
    v.add_argument("--no-cacd", action="store_true")
    v.add_argument("--levels", type=int, default=None)
    v.add_argument("--ablate-cacd", action="store_true")
    v.add_argument("--ablate-caft", action="store_true")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate between two curve CSVs")
    b.add_argument("--anchor", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bdrate)

    i = sub.add_parser("inspect", help="allocation map and bit-conversion-ratio map of an image")
    i.add_argument("--model")
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--alloc-out", help="PGM with one gray level per quality level")
    i.add_argument("--eta-out", help="CSV of per-block PSNR gain per bpp")
    i.add_argument("--eta-high", help="second model for the eta map (default: the first model's widest level)")
    i.add_argument("--levels", type=int, default=None)
    i.add_argument("--scale", type=int, default=1, help="pixels per latent location in the PGM")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "levels", None) is not None and args.levels < 1:
            raise UsageError("--levels must be >= 1")
        if getattr(args, "jobs", 1) < 1 or getattr(args, "scale", 1) < 1:
            raise UsageError("--jobs and --scale must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ev.RoundTripError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DataError, bs.BitstreamError, RangeCoderError, ImageError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - any other failure is an invariant violation
        print(f"internal error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

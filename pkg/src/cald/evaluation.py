"""RD measurement, RD curves and Bjøntegaard delta rate."""

from __future__ import annotations

import csv
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator

from . import bitstream as bs
from .images import read_image
from .metrics import PSNR_CAP, psnr
from .model import CodecModel, load_model

__all__ = [
    "PSNR_CAP",
    "BD_GRID_POINTS",
    "MIN_BD_POINTS",
    "RdPoint",
    "RdCurve",
    "RoundTripError",
    "psnr",
    "bdbr",
    "mean_log_rate_difference",
    "eval_run",
]

BD_GRID_POINTS = 1000
MIN_BD_POINTS = 4
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")
CKPT_PATTERN = re.compile(r"^(\d+(?:\.\d+)?)\.ckpt$")


class RoundTripError(RuntimeError):
    """Decoder output differs from the encoder-side reconstruction."""


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr: float

    def __post_init__(self):
        if not self.bpp > 0 or not math.isfinite(self.bpp):
            raise ValueError(f"bpp must be positive and finite, got {self.bpp}")
        if not math.isfinite(self.psnr):
            raise ValueError(f"psnr must be finite, got {self.psnr}")


@dataclass
class RdCurve:
    points: list[RdPoint]
    label: str = ""

    @classmethod
    def from_arrays(cls, bpp, psnr_db, label: str = "") -> "RdCurve":
        return cls([RdPoint(float(b), float(p)) for b, p in zip(bpp, psnr_db)], label)

    def sorted(self) -> "RdCurve":
        return RdCurve(sorted(self.points, key=lambda p: p.bpp), self.label)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])

    def validate(self, min_points: int = MIN_BD_POINTS):
        if len(self.points) < min_points:
            raise ValueError(f"curve {self.label!r} has {len(self.points)} points, need >= {min_points}")
        b = self.sorted().bpp
        if np.any(np.diff(b) <= 0):
            raise ValueError(f"curve {self.label!r}: bpp values must be distinct")


def _log_rate_interpolant(curve: RdCurve) -> tuple[PchipInterpolator, float, float]:
    curve.validate()
    order = np.argsort(curve.psnr)
    q = curve.psnr[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError(f"curve {curve.label!r}: PSNR values must be distinct")
    return PchipInterpolator(q, np.log2(curve.bpp[order])), float(q[0]), float(q[-1])


def mean_log_rate_difference(anchor: RdCurve, test: RdCurve, grid_points: int = BD_GRID_POINTS) -> float:
    """Average of log2(test rate) - log2(anchor rate) over the shared PSNR interval."""
    fa, lo_a, hi_a = _log_rate_interpolant(anchor)
    ft, lo_t, hi_t = _log_rate_interpolant(test)
    lo, hi = max(lo_a, lo_t), min(hi_a, hi_t)
    if not hi > lo:
        raise ValueError(f"no PSNR overlap: anchor [{lo_a:.3f}, {hi_a:.3f}] vs test [{lo_t:.3f}, {hi_t:.3f}]")
    grid = np.linspace(lo, hi, grid_points)
    return float(trapezoid(ft(grid) - fa(grid), grid) / (hi - lo))


def bdbr(anchor: RdCurve, test: RdCurve, grid_points: int = BD_GRID_POINTS) -> float:
    """BD-rate of ``test`` against ``anchor`` in percent; negative means bit-rate saving."""
    return (2.0 ** mean_log_rate_difference(anchor, test, grid_points) - 1.0) * 100.0


# -- evaluation runs ------------------------------------------------------------

@dataclass(frozen=True)
class EvalOptions:
    cacd: bool = True
    levels: int | None = None
    ablate_cacd: bool = False
    ablate_caft: bool = False
    jobs: int = 1


@dataclass
class EvalResult:
    curve: RdCurve
    rows: list[dict]
    per_model: list[dict] = field(default_factory=list)


PER_IMAGE_FIELDS = ["file", "lambda", "bpp", "psnr", "enc_ms", "dec_ms", "objective"]
PER_CURVE_FIELDS = ["lambda", "mean_bpp", "mean_psnr", "mean_objective"]


def list_images(image_dir) -> list[Path]:
    d = Path(image_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{image_dir}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{image_dir}: no .png/.ppm images")
    return files


def discover_models(model_dir) -> list[tuple[float, Path]]:
    """Checkpoints named ``<lambda>.ckpt`` in ``model_dir``, sorted by lambda."""
    d = Path(model_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{model_dir}: not a directory")
    found = []
    for p in d.iterdir():
        m = CKPT_PATTERN.match(p.name)
        if m:
            found.append((float(m.group(1)), p))
    if not found:
        raise ValueError(f"{model_dir}: no <lambda>.ckpt checkpoints")
    return sorted(found)


def objective(bpp: float, x: np.ndarray, x_hat: np.ndarray, lmbda: float) -> float:
    """R + lambda * MSE with MSE on [0, 1] pixels."""
    d = np.asarray(x, np.float64) - np.asarray(x_hat, np.float64)
    return bpp + lmbda * float(np.mean(d * d))


def evaluate_image(name: str, x: np.ndarray, model: CodecModel, opts: EvalOptions) -> dict:
    lam = model.config.lmbda
    enc_opts = bs.EncodeOptions(cacd=opts.cacd, levels=opts.levels)
    t0 = time.perf_counter()
    enc = bs.encode_image(x, model, opts=enc_opts)
    t1 = time.perf_counter()
    dec = bs.decode_image(enc.data, model)
    t2 = time.perf_counter()
    if dec.recon_hash != enc.recon_hash:
        raise RoundTripError(f"{name} at lambda {lam:g}: decoder hash {dec.recon_hash} != encoder hash {enc.recon_hash}")
    row = {
        "file": name,
        "lambda": lam,
        "bpp": enc.bpp,
        "psnr": psnr(x, dec.x_hat),
        "enc_ms": 1000.0 * (t1 - t0),
        "dec_ms": 1000.0 * (t2 - t1),
        "objective": objective(enc.bpp, x, dec.x_hat, lam),
    }
    if opts.ablate_cacd:
        off = bs.simulate_rd(x, model, opts=bs.EncodeOptions(cacd=False))
        row["bpp_cacd_off"] = off.bpp
        row["psnr_cacd_off"] = off.psnr
    if opts.ablate_caft:
        was = model.caft_enabled
        model.caft_enabled = False
        try:
            off = bs.simulate_rd(x, model, opts=enc_opts)
        finally:
            model.caft_enabled = was
        row["bpp_caft_off"] = off.bpp
        row["psnr_caft_off"] = off.psnr
        # a CAFT-trained decoder is not meant to run with its transform removed
        row["caft_off_valid"] = not model.config.caft
    return row


def eval_run(models, image_dir, opts: EvalOptions = EvalOptions()) -> EvalResult:
    """Real encode/decode of every image with every model; one curve point per model.

    ``models`` is a directory of ``<lambda>.ckpt`` files or a sequence of models.
    """
    if isinstance(models, (str, os.PathLike)):
        models = [load_model(p) for _, p in discover_models(models)]
    models = list(models)
    if not models:
        raise ValueError("no models to evaluate")
    images = [(p.name, read_image(p)) for p in list_images(image_dir)]

    def run_model(model):
        # one worker owns a model, so the CAFT ablation toggle never races
        return [evaluate_image(name, x, model, opts) for name, x in images]

    if opts.jobs > 1:
        with ThreadPoolExecutor(opts.jobs) as pool:
            per = list(pool.map(run_model, models))
    else:
        per = [run_model(m) for m in models]
    rows = [r for chunk in per for r in chunk]
    per_model = []
    for model in models:
        sel = [r for r in rows if r["lambda"] == model.config.lmbda]
        per_model.append(
            {
                "lambda": model.config.lmbda,
                "mean_bpp": float(np.mean([r["bpp"] for r in sel])),
                "mean_psnr": float(np.mean([r["psnr"] for r in sel])),
                "mean_objective": float(np.mean([r["objective"] for r in sel])),
            }
        )
    curve = RdCurve([RdPoint(m["mean_bpp"], m["mean_psnr"]) for m in per_model]).sorted()
    return EvalResult(curve, rows, per_model)


def _atomic_csv(path, fieldnames, rows):
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_per_image_csv(path, rows: list[dict]):
    extra = [k for k in (rows[0] if rows else {}) if k not in PER_IMAGE_FIELDS]
    _atomic_csv(path, PER_IMAGE_FIELDS + extra, rows)


def write_curve_csv(path, per_model: list[dict]):
    _atomic_csv(path, PER_CURVE_FIELDS, per_model)


def read_curve_csv(path, label: str = "") -> RdCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"mean_bpp", "mean_psnr"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    return RdCurve.from_arrays(
        [float(r["mean_bpp"]) for r in rows], [float(r["mean_psnr"]) for r in rows], label or str(path)
    ).sorted()


def write_bdbr_csv(path, anchor: str, test: str, value: float):
    _atomic_csv(path, ["anchor", "test", "bdbr_percent"], [{"anchor": anchor, "test": test, "bdbr_percent": value}])

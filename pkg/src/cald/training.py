"""Data ingestion, Adam, and the three-phase training schedule.

Phase 1 optimises the single-level RD loss at full width, phase 2 the
multi-level loss over all quality levels, and phase 3 continues the
multi-level loss with one more term for the per-image selected allocation,
logging mixed-allocation RD on a held-out set.
Every random draw at step ``s`` comes from ``default_rng([seed, s])`` so a
resumed run continues bit-exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import tensor as T
from .cacd import cacd_loss, mrdo_loss, psnr_from_mse
from .images import ImageError, read_image
from .model import CodecModel, ModelConfig, QualityLevelSet, read_checkpoint, save_model
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")
PHASES = ("rdo", "mrdo", "cacd")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    corpus: str = ""
    out_dir: str = "run"
    crop: int = 64
    batch: int = 4
    lmbda: float = 1024.0
    k: int = 3
    n: int = 32
    m: int = 32
    c: int = 24
    caft: bool = True
    steps_rdo: int = 5000
    steps_mrdo: int = 5000
    steps_cacd: int = 2000
    lr: float = 5e-5
    lr_final: float = 5e-6
    final_fraction: float = 0.2  # share of each phase run at lr_final
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 10
    heldout: str = ""
    heldout_every: int = 500
    init_from: str = ""  # start from these weights (fine-tuning)
    resume: bool = True
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        for name in ("crop", "batch", "k", "n", "m", "c", "checkpoint_every", "log_every", "heldout_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("steps_rdo", "steps_mrdo", "steps_cacd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.total_steps == 0:
            raise ValueError("all phases have zero steps")
        if self.crop % 64:
            raise ValueError(f"crop {self.crop} must be a multiple of 64")
        if self.k == 1 and (self.steps_mrdo or self.steps_cacd):
            raise ValueError("multi-level phases need k > 1")
        if not (self.lr > 0 and self.lr_final > 0) or not 0 <= self.final_fraction < 1:
            raise ValueError("learning rates must be positive and final_fraction in [0, 1)")

    @property
    def total_steps(self) -> int:
        return self.steps_rdo + self.steps_mrdo + self.steps_cacd

    def model_config(self) -> ModelConfig:
        return ModelConfig(n=self.n, m=self.m, c=self.c, caft=self.caft, lmbda=self.lmbda, k=self.k, seed=self.seed)

    def phase_at(self, step: int) -> tuple[str, int, int]:
        """(phase name, step within phase, phase length) for a global 0-based step."""
        start = 0
        for name, length in zip(PHASES, (self.steps_rdo, self.steps_mrdo, self.steps_cacd)):
            if step < start + length:
                return name, step - start, length
            start += length
        raise IndexError(f"step {step} beyond the schedule of {self.total_steps}")

    def lr_at(self, step: int) -> float:
        _, local, length = self.phase_at(step)
        return self.lr_final if local >= length * (1.0 - self.final_fraction) else self.lr

    def digest(self) -> str:
        """Hash of everything that shapes the trajectory (paths and cadences excluded)."""
        skip = {"out_dir", "checkpoint_every", "log_every", "resume", "heldout_every"}
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in skip}
        return hashlib.blake2b(json.dumps(d, sort_keys=True).encode(), digest_size=8).hexdigest()


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {key}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    base = Path(path).parent
    # relative paths in a config file are relative to the file
    for key in ("corpus", "out_dir", "heldout", "init_from"):
        v = getattr(cfg, key)
        if v and not os.path.isabs(v):
            setattr(cfg, key, str(base / v))
    return cfg


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# -- data -----------------------------------------------------------------------

def load_images(path) -> list[tuple[str, np.ndarray]]:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"{path}: corpus directory not found")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, bad = [], []
    for p in files:
        try:
            images.append((p.name, read_image(p)))
        except ImageError:
            bad.append(p.name)
    if not images:
        listing = ", ".join(p.name for p in files) or "(no .png/.ppm files)"
        raise ValueError(f"{path}: no decodable images; files: {listing}")
    if bad:
        warnings.warn(f"skipping undecodable images: {', '.join(bad)}")
    return images


class BatchSource:
    """Seeded random crops; batch ``s`` depends only on (seed, s)."""

    def __init__(self, images: list[tuple[str, np.ndarray]], crop: int, batch: int, seed: int):
        usable = [(n, x) for n, x in images if x.shape[2] >= crop and x.shape[3] >= crop]
        small = [n for n, x in images if x.shape[2] < crop or x.shape[3] < crop]
        if small:
            warnings.warn(f"skipping images smaller than the {crop}x{crop} crop: {', '.join(small)}")
        if not usable:
            raise ValueError(f"no image is at least {crop}x{crop}")
        self.images = [x for _, x in usable]
        self.names = [n for n, _ in usable]
        self.crop = crop
        self.batch = batch
        self.seed = seed

    def __call__(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, step, 0])
        out = np.empty((self.batch, 3, self.crop, self.crop), np.float32)
        for i in range(self.batch):
            x = self.images[int(rng.integers(len(self.images)))]
            top = int(rng.integers(x.shape[2] - self.crop + 1))
            left = int(rng.integers(x.shape[3] - self.crop + 1))
            out[i] = x[0, :, top : top + self.crop, left : left + self.crop]
        return out

    def __iter__(self):
        step = 0
        while True:
            yield self(step)
            step += 1


def ingest(corpus, crop: int = 64, seed: int = 0, batch: int = 4) -> BatchSource:
    return BatchSource(load_images(corpus), crop, batch, seed)


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> bool:
    """One bias-corrected Adam update in place; returns False (and changes nothing) on a non-finite gradient."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient {name}: {g.shape} vs parameter {params[name].shape}")
        if name in state.m and state.m[name].shape != g.shape:
            raise T.ShapeError(f"optimizer state {name}: {state.m[name].shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s at adam step %d; step skipped", name, state.t + 1)
            return False
    b1, b2 = ADAM_BETAS
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    # moments live in float32, the checkpoint precision, so resuming is exact
    for name, g in grads.items():
        p = params[name]
        g32 = g.astype(np.float32)
        m = state.m.get(name, np.zeros(p.shape, np.float32))
        v = state.v.get(name, np.zeros(p.shape, np.float32))
        m = (np.float32(b1) * m + np.float32(1.0 - b1) * g32).astype(np.float32)
        v = (np.float32(b2) * v + np.float32(1.0 - b2) * g32 * g32).astype(np.float32)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = (p.data - update).astype(p.dtype)
    return True


# -- losses -----------------------------------------------------------------------

def step_loss(model: CodecModel, x: np.ndarray, levels: QualityLevelSet, rng: np.random.Generator, adaptive: bool = False):
    return (cacd_loss if adaptive else mrdo_loss)(Tensor(x), model, levels, rng)


def compute_grads(model: CodecModel, loss: Tensor) -> dict[str, np.ndarray]:
    named = list(model.named_parameters())
    grads = T.backward(loss, [p for _, p in named])
    return {name: grads[id(p)] for name, p in named}


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(total) or total <= max_norm:
        return grads
    s = max_norm / total
    return {k: (g * s).astype(g.dtype) for k, g in grads.items()}


# -- checkpoints -------------------------------------------------------------------

def save_training_checkpoint(path, model: CodecModel, state: AdamState, step: int, cfg: TrainConfig):
    extra = {f"adam.m.{k}": v for k, v in state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.v.items()})
    meta = {
        "step": step,
        "adam_t": state.t,
        "adam_skipped": state.skipped,
        "config_hash": cfg.digest(),
        "train_config": dataclasses.asdict(cfg),
    }
    save_model(path, model, meta, extra)


def load_training_checkpoint(path, model: CodecModel, cfg: TrainConfig | None = None) -> tuple[AdamState, int]:
    meta, tensors = read_checkpoint(path)
    if cfg is not None and meta.get("config_hash") != cfg.digest():
        raise ValueError(f"{path}: checkpoint was written by a different training configuration")
    own = {name for name, _ in model.named_parameters()}
    model.load_state_dict({k: v for k, v in tensors.items() if k in own})
    state = AdamState(t=int(meta.get("adam_t", 0)), skipped=int(meta.get("adam_skipped", 0)))
    for k, v in tensors.items():
        if k.startswith("adam.m."):
            state.m[k[7:]] = v
        elif k.startswith("adam.v."):
            state.v[k[7:]] = v
    return state, int(meta.get("step", 0))


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CodecModel
    checkpoint: Path
    steps: int
    log_path: Path
    losses: list[float] = field(default_factory=list)
    handoff: dict | None = None
    heldout_path: Path | None = None


def lambda_name(lmbda: float) -> str:
    return f"{int(lmbda)}" if float(lmbda).is_integer() else f"{lmbda:g}"


def _log_fields(k: int) -> list[str]:
    return (
        ["step", "phase", "lr"]
        + [f"rate_{i}" for i in range(k)]
        + [f"psnr_{i}" for i in range(k)]
        + (["rate_adapted", "psnr_adapted"] if k > 1 else [])
        + ["loss"]
    )


def _heldout_rd(model: CodecModel, images, step: int) -> list[dict]:
    rows = []
    for name, x in images:
        on = bs.simulate_rd(x, model)
        off = bs.simulate_rd(x, model, opts=bs.EncodeOptions(cacd=False))
        rows.append(
            {
                "step": step,
                "file": name,
                "bpp_mixed": on.bpp,
                "psnr_mixed": on.psnr,
                "bpp_full": off.bpp,
                "psnr_full": off.psnr,
                "levels_used": " ".join(str(int(c)) for c in np.bincount(on.allocation.ravel(), minlength=model.config.k)),
            }
        )
    return rows


def _append_csv(path: Path, fields: list[str], rows: list[dict]):
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        if new:
            w.writeheader()
        w.writerows(rows)


def _truncate_log(path: Path, upto_step: int):
    """Drop log rows at or beyond ``upto_step`` so a resumed run does not duplicate them."""
    if not path.exists():
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
        fields = rows[0].keys() if rows else None
    keep = [r for r in rows if int(r["step"]) < upto_step]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fields:
            w = csv.DictWriter(fh, fieldnames=list(fields))
            w.writeheader()
            w.writerows(keep)


def train(cfg: TrainConfig, stop_after: int | None = None, batches: BatchSource | None = None) -> TrainResult:
    """Run (or resume) the schedule; ``stop_after`` ends early after that many global steps."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    batches = batches or ingest(cfg.corpus, cfg.crop, cfg.seed, cfg.batch)
    heldout = load_images(cfg.heldout) if cfg.heldout else []
    model = CodecModel(cfg.model_config())
    state = AdamState()
    start = 0
    last = out / "last.ckpt"
    log_path = out / "train_log.csv"
    held_path = out / "heldout_log.csv"
    if cfg.resume and last.exists():
        state, start = load_training_checkpoint(last, model, cfg)
        log.info("resuming from step %d", start)
    else:
        if cfg.init_from:
            _, tensors = read_checkpoint(cfg.init_from)
            _partial_load(model, tensors)
        for p in (log_path, held_path):
            if p.exists():
                p.unlink()
    _truncate_log(log_path, start)
    _truncate_log(held_path, start)

    params = dict(model.named_parameters())
    full = model.levels.truncated(1)
    fields = _log_fields(cfg.k)
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    losses: list[float] = []
    handoff = None
    prev_phase = cfg.phase_at(start - 1)[0] if start > 0 else None
    last_rdo_loss = None
    pending: list[dict] = []

    for step in range(start, end):
        phase, _, _ = cfg.phase_at(step)
        levels = full if phase == "rdo" else model.levels
        rng = np.random.default_rng([cfg.seed, step, 1])
        result = step_loss(model, batches(step), levels, rng, adaptive=phase == "cacd")
        loss = float(result.loss.data)
        if not math.isfinite(loss):
            _append_csv(log_path, fields, pending)
            save_training_checkpoint(last, model, state, step, cfg)
            raise TrainingDiverged(step, last)
        if phase == "rdo":
            last_rdo_loss = loss
        elif prev_phase == "rdo" and handoff is None:
            target_term = float(result.terms[0].rate.data) + cfg.lmbda * float(result.terms[0].mse.data)
            handoff = {"step": step, "rdo_loss": last_rdo_loss, "target_term": target_term, "mrdo_loss": loss}
            log.info("phase handoff: %s", handoff)
        prev_phase = phase
        grads = clip_grads(compute_grads(model, result.loss), cfg.max_grad_norm)
        adam_step(params, grads, state, cfg.lr_at(step))
        losses.append(loss)

        if step % cfg.log_every == 0 or step == end - 1:
            row = {"step": step, "phase": phase, "lr": cfg.lr_at(step), "loss": loss}
            for i, (r, q) in enumerate(zip(result.rates(), result.psnrs())):
                row[f"rate_{i}"] = r
                row[f"psnr_{i}"] = q
            if result.adapted is not None:
                row["rate_adapted"] = float(result.adapted.rate.data)
                row["psnr_adapted"] = psnr_from_mse(float(result.adapted.mse.data))
            pending.append(row)
        if phase == "cacd" and heldout and (step % cfg.heldout_every == 0 or step == cfg.total_steps - 1):
            held_rows = _heldout_rd(model, heldout, step)
            _append_csv(held_path, list(held_rows[0]), held_rows)
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == end:
            _append_csv(log_path, fields, pending)
            pending = []
            save_training_checkpoint(last, model, state, done, cfg)

    final = out / f"{lambda_name(cfg.lmbda)}.ckpt"
    if end == cfg.total_steps:
        save_model(final, model, {"train_config": dataclasses.asdict(cfg), "step": end})
    return TrainResult(model, final if final.exists() else last, end, log_path, losses, handoff, held_path if heldout else None)


def _partial_load(model: CodecModel, tensors: dict[str, np.ndarray]):
    """Fine-tuning from a model with fewer modules (e.g. no CAFT): copy what matches, keep fresh init elsewhere."""
    for name, p in model.named_parameters():
        if name in tensors and tensors[name].shape == p.shape:
            p.data = tensors[name].astype(p.dtype)

"""Mean-scale hyperprior codec with content-adaptive feature transformation in the decoder."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .entropy.models import FactorizedPrior
from .layers import GDN, Conv2d, ConvTranspose2d, LeakyReLU, Module, Sequential
from .tensor import ShapeError, Tensor

# deployment lambdas; a bitstream header stores an index into this list
LAMBDA_REGISTRY = (128, 256, 512, 1024, 2048, 4096, 6144)
PAD_MULTIPLE = 64


def default_widths(m: int, k: int = 3) -> tuple[int, ...]:
    fractions = (1.0, 0.75, 0.5)
    if k > len(fractions):
        raise ValueError(f"at most {len(fractions)} default levels")
    return tuple(int(math.ceil(f * m)) for f in fractions[:k])


@dataclass(frozen=True)
class QualityLevelSet:
    """K quality levels; index 0 is the target lambda with the full channel width."""

    lambdas: tuple[float, ...]
    widths: tuple[int, ...]

    def __post_init__(self):
        if not self.lambdas or len(self.lambdas) != len(self.widths):
            raise ValueError("need K >= 1 lambdas with one width each")
        if any(a <= b for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError(f"lambdas must be strictly decreasing, got {self.lambdas}")
        if any(a <= b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"widths must strictly decrease with lambda, got {self.widths}")
        if self.widths[-1] < 1:
            raise ValueError("widths must be positive")

    @property
    def k(self) -> int:
        return len(self.lambdas)

    @property
    def target(self) -> float:
        return self.lambdas[0]

    @classmethod
    def default(cls, target: float, m: int, k: int = 3) -> "QualityLevelSet":
        return cls(tuple(target / 2**i for i in range(k)), default_widths(m, k))

    def truncated(self, k: int) -> "QualityLevelSet":
        return QualityLevelSet(self.lambdas[:k], self.widths[:k])


@dataclass
class ModelConfig:
    n: int = 32  # hyperprior channels
    m: int = 32  # latent channels
    c: int = 24  # characteristic-feature channels
    caft: bool = True
    lmbda: float = 1024.0
    k: int = 3
    widths: tuple[int, ...] = field(default=())
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths) if self.widths else default_widths(self.m, self.k)
        if len(self.widths) != self.k or self.widths[0] != self.m:
            raise ValueError(f"widths {self.widths} must have K={self.k} entries starting at M={self.m}")
        if self.k > 1 and self.n != self.m:
            raise ValueError(f"channel dropping over {self.k} levels needs N == M, got N={self.n}, M={self.m}")

    @property
    def masking(self) -> bool:
        """Channel masking of the hyperprior needs aligned channel indices."""
        return self.n == self.m

    @property
    def levels(self) -> QualityLevelSet:
        return QualityLevelSet(tuple(self.lmbda / 2**i for i in range(self.k)), self.widths)

    @property
    def lambda_index(self) -> int:
        try:
            return LAMBDA_REGISTRY.index(int(round(self.lmbda)))
        except ValueError:
            return 255

    @classmethod
    def full_size(cls, lmbda: float = 1024.0, high_rate: bool = False) -> "ModelConfig":
        ch = 320 if high_rate else 192
        return cls(n=ch, m=ch, c=192, lmbda=lmbda)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class CaftLayer(Module):
    """Mixes characteristic features with decoder features and applies f * gamma + beta."""

    def __init__(self, feat: int, cond: int, last: bool, seed):
        super().__init__()
        s = iter(range(100))
        sd = lambda: [*seed, next(s)]  # noqa: E731
        self.mix = Sequential(
            Conv2d(cond + feat, cond, 3, 1, sd()),
            LeakyReLU(),
            Conv2d(cond, cond, 3, 1, sd()),
            LeakyReLU(),
        )
        self.psi_gamma = Sequential(Conv2d(cond, cond, 3, 1, sd()), LeakyReLU(), Conv2d(cond, feat, 3, 1, sd()))
        self.psi_beta = Sequential(Conv2d(cond, cond, 3, 1, sd()), LeakyReLU(), Conv2d(cond, feat, 3, 1, sd()))
        # zero-initialised output branches make the fresh layer the identity map
        for branch, bias in ((self.psi_gamma, 1.0), (self.psi_beta, 0.0)):
            out = branch.layers[-1]
            out.weight.data[...] = 0.0
            out.bias.data[...] = bias
        self.upsample = None if last else ConvTranspose2d(cond, cond, 3, 2, sd())

    def forward(self, f: Tensor, c: Tensor) -> tuple[Tensor, Tensor | None]:
        if f.shape[2:] != c.shape[2:] or f.shape[0] != c.shape[0]:
            raise ShapeError(f"CAFT inputs misaligned: feature {f.shape}, condition {c.shape}")
        mixed = self.mix(ops.concat_channels(c, f))
        gamma = self.psi_gamma(mixed)
        beta = self.psi_beta(mixed)
        adapted = T.add(T.mul(f, gamma), beta)
        nxt = self.upsample(mixed) if self.upsample is not None else None
        return adapted, nxt


class CodecModel(Module):
    def __init__(self, config: ModelConfig | None = None, dtype=np.float32):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        n, m, c, seed = cfg.n, cfg.m, cfg.c, cfg.seed
        self.encoder = Sequential(
            Conv2d(3, n, 5, 2, [seed, 0]),
            GDN(n),
            Conv2d(n, n, 5, 2, [seed, 1]),
            GDN(n),
            Conv2d(n, n, 5, 2, [seed, 2]),
            GDN(n),
            Conv2d(n, m, 5, 2, [seed, 3]),
        )
        self.hyper_encoder = Sequential(
            Conv2d(m, n, 3, 1, [seed, 10]),
            LeakyReLU(),
            Conv2d(n, n, 5, 2, [seed, 11]),
            LeakyReLU(),
            Conv2d(n, n, 5, 2, [seed, 12]),
        )
        self.entropy_net = Sequential(
            ConvTranspose2d(n, m, 5, 2, [seed, 20]),
            LeakyReLU(),
            ConvTranspose2d(m, m * 3 // 2, 5, 2, [seed, 21]),
            LeakyReLU(),
            ConvTranspose2d(m * 3 // 2, 2 * m, 3, 1, [seed, 22]),
        )
        self.prior = FactorizedPrior(n)
        self._params["prior.loc"] = self.prior.loc
        self._params["prior.raw_scale"] = self.prior.raw_scale
        self.decoder_up = [
            ConvTranspose2d(m, n, 5, 2, [seed, 30]),
            ConvTranspose2d(n, n, 5, 2, [seed, 31]),
            ConvTranspose2d(n, n, 5, 2, [seed, 32]),
            ConvTranspose2d(n, 3, 5, 2, [seed, 33]),
        ]
        self.decoder_igdn = [GDN(n, inverse=True) for _ in range(3)]
        for i, layer in enumerate(self.decoder_up):
            self._children[f"decoder.up{i}"] = layer
        for i, layer in enumerate(self.decoder_igdn):
            self._children[f"decoder.igdn{i}"] = layer
        self.caft_enabled = cfg.caft
        if cfg.caft:
            self.extractor = Sequential(
                ConvTranspose2d(n, c, 5, 2, [seed, 40]),
                LeakyReLU(),
                ConvTranspose2d(c, c, 5, 2, [seed, 41]),
                LeakyReLU(),
                ConvTranspose2d(c, c, 5, 2, [seed, 42]),
            )
            self.caft_layers = [CaftLayer(n, c, last=(i == 2), seed=[seed, 50 + i]) for i in range(3)]
            for i, layer in enumerate(self.caft_layers):
                self._children[f"caft{i}"] = layer
        else:
            self.extractor = None
            self.caft_layers = []
        if dtype != np.float32:
            self.cast(dtype)

    # -- parameter utilities ---------------------------------------------
    def cast(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    @property
    def levels(self) -> QualityLevelSet:
        return self.config.levels

    # -- network stages ----------------------------------------------------
    def analyze(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"analyze expects [N,3,H,W], got {x.shape}")
        if x.shape[2] % PAD_MULTIPLE or x.shape[3] % PAD_MULTIPLE:
            raise ShapeError(f"image extent {x.shape[2]}x{x.shape[3]} is not a multiple of {PAD_MULTIPLE}; pad first")
        return self.encoder(x)

    def hyper_analyze(self, y: Tensor) -> Tensor:
        if y.shape[1] != self.config.m:
            raise ShapeError(f"hyper_analyze expects {self.config.m} channels, got {y.shape}")
        return self.hyper_encoder(y)

    def entropy_parameters(self, z_hat: Tensor) -> tuple[Tensor, Tensor]:
        if z_hat.shape[1] != self.config.n:
            raise ShapeError(f"entropy_parameters expects {self.config.n} channels, got {z_hat.shape}")
        out = self.entropy_net(z_hat)
        m = self.config.m
        mu = T.channel_slice(out, 0, m)
        sigma = T.softplus(T.channel_slice(out, m, 2 * m))
        return mu, sigma

    def extract_characteristics(self, z_hat: Tensor) -> Tensor | None:
        if self.extractor is None or not self.caft_enabled:
            return None
        return self.extractor(z_hat)

    def synthesize(self, y_hat: Tensor, c1: Tensor | None = None) -> Tensor:
        if y_hat.shape[1] != self.config.m:
            raise ShapeError(f"synthesize expects {self.config.m} channels, got {y_hat.shape}")
        use_caft = self.caft_enabled and self.caft_layers and c1 is not None
        if use_caft and c1.shape[2] != 2 * y_hat.shape[2]:
            raise ShapeError(f"characteristic map {c1.shape} does not match latent {y_hat.shape}")
        f = y_hat
        c = c1
        for i in range(3):
            f = self.decoder_igdn[i](self.decoder_up[i](f))
            if use_caft:
                f, c = self.caft_layers[i](f, c)
        return self.decoder_up[3](f)

    def decode_latents(self, y_hat: Tensor, z_hat: Tensor) -> Tensor:
        """Reconstruction from (masked) quantized latents; the decoder-side path."""
        return self.synthesize(y_hat, self.extract_characteristics(z_hat))


# -- checkpoint I/O ---------------------------------------------------------

CHECKPOINT_MAGIC = b"CALDCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def write_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]):
    """Write atomically: magic, version, JSON meta block, named f32 tensors, 64-bit checksum."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # tobytes() is C-order; ascontiguousarray would promote 0-d
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", _checksum64(body)))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 17 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum64(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<B", body, pos)
    pos += 1
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return meta, tensors


def save_model(path, model: CodecModel, extra_meta: dict | None = None, extra_tensors=None):
    meta = {"kind": "cald-model", "config": model.config.to_dict()}
    meta.update(extra_meta or {})
    tensors = model.state_dict()
    tensors.update(extra_tensors or {})
    write_checkpoint(path, meta, tensors)


def load_model(path) -> CodecModel:
    meta, tensors = read_checkpoint(path)
    cfg = meta["config"]
    model = CodecModel(ModelConfig(**{**cfg, "widths": tuple(cfg["widths"])}))
    own = set(name for name, _ in model.named_parameters())
    model.load_state_dict({k: v for k, v in tensors.items() if k in own})
    return model


def model_fingerprint(model: CodecModel) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()

"""Container format and the end-to-end encode / decode pipeline.

Layout (little-endian)::

    header   magic "CALD" | version u8 | flags u8 | width u16 | height u16 |
             lambda-index u8 | K u8 | K x u16 widths | y_lo y_hi z_lo z_hi (i16) |
             3 x u32 payload lengths (allocation, z, y) | crc32 of the preceding header bytes
    payloads allocation (2-bit codes, MSB first, row-major; only with the CACD flag),
             range-coded z_hat (channel-major), range-coded y_hat (channel-major)
    trailer  u64 BLAKE2b-64 digest of header + payloads

Masked-out latent elements are neither coded nor counted in the rate.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import cacd
from . import inference as inf
from .entropy.models import gaussian_cdfs, logistic_cdfs
from .entropy.rangecoder import RangeCoderError, range_decode, range_encode
from .metrics import psnr
from .model import CodecModel, QualityLevelSet

MAGIC = b"CALD"
VERSION = 1
FLAG_CACD = 1
FLAG_CAFT = 2
FLAG_MEAN_SHIFT = 4
_KNOWN_FLAGS = FLAG_CACD | FLAG_CAFT | FLAG_MEAN_SHIFT
MAX_LEVELS = 4  # 2-bit allocation codes
SYMBOL_CAP = 64  # tables span at most [-SYMBOL_CAP, SYMBOL_CAP]; the rest is escaped
TRAILER_BYTES = 8

_FIXED = struct.Struct("<4sBBHHBB")
_RANGES = struct.Struct("<4h")
_LENGTHS = struct.Struct("<3I")
_CRC = struct.Struct("<I")


# -- errors -------------------------------------------------------------------

class BitstreamError(ValueError):
    """Malformed stream; ``field`` names the offending part, ``offset`` the byte position if known."""

    def __init__(self, field: str, message: str, offset: int | None = None):
        self.field = field
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{field}: {message}{where}")


class TruncatedError(BitstreamError):
    pass


class ChecksumError(BitstreamError):
    pass


class ModelMismatchError(BitstreamError):
    pass


# -- container ----------------------------------------------------------------

@dataclass(frozen=True)
class Header:
    width: int
    height: int
    lambda_index: int
    widths: tuple[int, ...]
    y_range: tuple[int, int]
    z_range: tuple[int, int]
    payload_lengths: tuple[int, int, int]
    cacd: bool = False
    caft: bool = False
    mean_shift: bool = True
    version: int = VERSION

    @property
    def k(self) -> int:
        return len(self.widths)

    @property
    def flags(self) -> int:
        return (FLAG_CACD * self.cacd) | (FLAG_CAFT * self.caft) | (FLAG_MEAN_SHIFT * self.mean_shift)

    @staticmethod
    def size_for(k: int) -> int:
        return _FIXED.size + 2 * k + _RANGES.size + _LENGTHS.size + _CRC.size

    @property
    def size(self) -> int:
        return self.size_for(self.k)

    def pack(self) -> bytes:
        if not 1 <= self.k <= MAX_LEVELS:
            raise ValueError(f"K={self.k} outside 1..{MAX_LEVELS}")
        body = (
            _FIXED.pack(MAGIC, self.version, self.flags, self.width, self.height, self.lambda_index, self.k)
            + struct.pack(f"<{self.k}H", *self.widths)
            + _RANGES.pack(*self.y_range, *self.z_range)
            + _LENGTHS.pack(*self.payload_lengths)
        )
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < _FIXED.size:
            raise TruncatedError("header", f"need {_FIXED.size} bytes, stream has {len(data)}", len(data))
        magic, version, flags, width, height, lam, k = _FIXED.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError("magic", f"expected {MAGIC!r}, found {magic!r}", 0)
        if version != VERSION:
            raise BitstreamError("version", f"unsupported version {version}", 4)
        if not 1 <= k <= MAX_LEVELS:
            raise BitstreamError("K", f"level count {k} outside 1..{MAX_LEVELS}", _FIXED.size - 1)
        size = cls.size_for(k)
        if len(data) < size:
            raise TruncatedError("header", f"need {size} bytes, stream has {len(data)}", len(data))
        body = data[: size - _CRC.size]
        (crc,) = _CRC.unpack_from(data, size - _CRC.size)
        if zlib.crc32(body) != crc:
            raise ChecksumError("header_checksum", "header CRC mismatch", size - _CRC.size)
        if flags & ~_KNOWN_FLAGS:
            raise BitstreamError("flags", f"unknown flag bits {flags:#04x}", 5)
        if width == 0 or height == 0:
            raise BitstreamError("dimensions", f"zero image extent {width}x{height}", 6)
        pos = _FIXED.size
        widths = struct.unpack_from(f"<{k}H", data, pos)
        pos += 2 * k
        if widths[-1] < 1 or any(a <= b for a, b in zip(widths, widths[1:])):
            raise BitstreamError("widths", f"widths {widths} are not strictly decreasing and positive", _FIXED.size)
        y_lo, y_hi, z_lo, z_hi = _RANGES.unpack_from(data, pos)
        if y_lo > y_hi or z_lo > z_hi:
            raise BitstreamError("symbol_ranges", f"empty range y=({y_lo},{y_hi}) z=({z_lo},{z_hi})", pos)
        pos += _RANGES.size
        lengths = _LENGTHS.unpack_from(data, pos)
        return cls(
            width=width,
            height=height,
            lambda_index=lam,
            widths=tuple(widths),
            y_range=(y_lo, y_hi),
            z_range=(z_lo, z_hi),
            payload_lengths=tuple(lengths),
            cacd=bool(flags & FLAG_CACD),
            caft=bool(flags & FLAG_CAFT),
            mean_shift=bool(flags & FLAG_MEAN_SHIFT),
            version=version,
        )


@dataclass(frozen=True)
class Bitstream:
    header: Header
    allocation: bytes
    z_payload: bytes
    y_payload: bytes

    def to_bytes(self) -> bytes:
        body = self.header.pack() + self.allocation + self.z_payload + self.y_payload
        return body + struct.pack("<Q", _digest64(body))

    def __len__(self) -> int:
        return self.header.size + len(self.allocation) + len(self.z_payload) + len(self.y_payload) + TRAILER_BYTES

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        data = bytes(data)
        header = Header.unpack(data)
        start = header.size
        total = start + sum(header.payload_lengths) + TRAILER_BYTES
        if len(data) < total:
            raise TruncatedError("payload", f"stream is {len(data)} bytes, header declares {total}", len(data))
        if len(data) > total:
            raise BitstreamError("length", f"{len(data) - total} trailing bytes after the stream", total)
        (stored,) = struct.unpack_from("<Q", data, total - TRAILER_BYTES)
        if _digest64(data[: total - TRAILER_BYTES]) != stored:
            raise ChecksumError("stream_checksum", "payload checksum mismatch", total - TRAILER_BYTES)
        la, lz, ly = header.payload_lengths
        return cls(
            header,
            data[start : start + la],
            data[start + la : start + la + lz],
            data[start + la + lz : start + la + lz + ly],
        )


def _digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def allocation_bytes(latent_h: int, latent_w: int) -> int:
    return -(-2 * latent_h * latent_w // 8)


def pack_allocation(alloc: np.ndarray) -> bytes:
    codes = np.asarray(alloc, np.uint8).ravel()
    if codes.size and codes.max() >= MAX_LEVELS:
        raise ValueError("allocation codes must fit in 2 bits")
    padded = np.zeros(-(-codes.size // 4) * 4, np.uint8)
    padded[: codes.size] = codes
    q = padded.reshape(-1, 4)
    return ((q[:, 0] << 6) | (q[:, 1] << 4) | (q[:, 2] << 2) | q[:, 3]).astype(np.uint8).tobytes()


def unpack_allocation(data: bytes, shape: tuple[int, int]) -> np.ndarray:
    b = np.frombuffer(data, np.uint8)
    codes = np.stack([(b >> 6) & 3, (b >> 4) & 3, (b >> 2) & 3, b & 3], axis=1).ravel()
    n = shape[0] * shape[1]
    return codes[:n].astype(np.int64).reshape(shape)


def reconstruction_hash(x_hat: np.ndarray) -> str:
    arr = np.ascontiguousarray(x_hat, dtype="<f4")
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
    h.update(arr.tobytes())
    return h.hexdigest()


# -- pipeline -----------------------------------------------------------------

@dataclass(frozen=True)
class EncodeOptions:
    cacd: bool = True
    levels: int | None = None  # use only the first k quality levels for selection


@dataclass
class Plan:
    """Everything the encoder decides before entropy coding."""

    x: np.ndarray
    x_padded: np.ndarray
    levels: QualityLevelSet
    cacd: bool
    allocation: np.ndarray
    q: inf.QuantizedLatents
    x_hat: np.ndarray  # cropped, clamped reconstruction
    selection: cacd.Selection | None = None

    @property
    def pixels(self) -> int:
        return self.x.shape[2] * self.x.shape[3]


@dataclass
class EncodeResult:
    bitstream: Bitstream
    data: bytes
    x_hat: np.ndarray
    recon_hash: str
    estimated_bits: float
    allocation: np.ndarray
    psnr: float

    @property
    def bits(self) -> int:
        return 8 * len(self.data)

    @property
    def bpp(self) -> float:
        h, w = self.x_hat.shape[2:]
        return self.bits / (h * w)


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float32)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected one RGB image [1,3,H,W], got {x.shape}")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ValueError("image has zero area")
    if x.shape[2] > 0xFFFF or x.shape[3] > 0xFFFF:
        raise ValueError(f"image extent {x.shape[2:]} exceeds the 16-bit header fields")
    return x


def _effective_levels(model: CodecModel, levels: QualityLevelSet | None, opts: EncodeOptions) -> tuple[QualityLevelSet, bool]:
    levels = levels or model.levels
    if opts.levels is not None:
        if not 1 <= opts.levels <= levels.k:
            raise ValueError(f"--levels {opts.levels} outside 1..{levels.k}")
        levels = levels.truncated(opts.levels)
    if levels.widths[0] != model.config.m:
        raise ValueError(f"level 0 must use all {model.config.m} channels, got {levels.widths}")
    use_cacd = opts.cacd and levels.k > 1
    if use_cacd and not model.config.masking:
        raise ValueError("channel dropping needs N == M")
    if levels.k > MAX_LEVELS:
        raise ValueError(f"at most {MAX_LEVELS} quality levels fit the allocation codes")
    if not use_cacd:
        levels = levels.truncated(1)
    return levels, use_cacd


def plan_encode(x: np.ndarray, model: CodecModel, levels: QualityLevelSet | None = None, opts: EncodeOptions = EncodeOptions()) -> Plan:
    x = _check_image(x)
    levels, use_cacd = _effective_levels(model, levels, opts)
    xp = inf.pad_image(x)
    y, z = inf.analyze(model, xp)
    latent_hw = y.shape[2:]
    selection = None
    if use_cacd:
        selection = cacd.select_allocation(xp, model, levels, y, z)
        alloc, mask = selection.allocation, selection.mask
    else:
        alloc = np.zeros(latent_hw, np.int64)
        mask = inf.level_mask(model.config.m, model.config.m, latent_hw)
    q = inf.quantize(model, y, z, mask)
    x_hat = _finish(inf.reconstruct(model, q.y_hat, q.z_hat), x.shape)
    return Plan(x, xp, levels, use_cacd, alloc, q, x_hat, selection)


def _finish(x_hat_padded: np.ndarray, shape) -> np.ndarray:
    return np.clip(x_hat_padded[:, :, : shape[2], : shape[3]], 0.0, 1.0).astype(np.float32)


def overhead_bits(k: int, cacd_on: bool, latent_hw: tuple[int, int]) -> int:
    """Exact container bytes outside the two range-coded payloads, in bits."""
    alloc = allocation_bytes(*latent_hw) if cacd_on else 0
    return 8 * (Header.size_for(k) + alloc + TRAILER_BYTES)


def estimated_bits(model: CodecModel, plan: Plan) -> float:
    y_bits = float(inf.y_bits_map(plan.q).sum())
    z_bits = float(inf.z_bits_map(model, plan.q).sum())
    return y_bits + z_bits + overhead_bits(plan.levels.k, plan.cacd, plan.q.y_hat.shape[2:])


def _symbol_range(symbols: np.ndarray) -> tuple[int, int]:
    if symbols.size == 0:
        return 0, 0
    lo = int(np.clip(symbols.min(), -SYMBOL_CAP, SYMBOL_CAP))
    hi = int(np.clip(symbols.max(), -SYMBOL_CAP, SYMBOL_CAP))
    return lo, hi


def _z_tables(model: CodecModel, hmask: np.ndarray, lo: int, hi: int):
    scale = model.prior.scale().data.astype(np.float64)
    per_channel = logistic_cdfs(scale, lo, hi)
    counts = hmask.reshape(hmask.shape[0], -1).sum(axis=1).astype(np.int64)
    return [t for t, n in zip(per_channel, counts) for _ in range(n)]


def _y_tables(sigma: np.ndarray, mask: np.ndarray, lo: int, hi: int):
    return gaussian_cdfs(sigma[0][mask.astype(bool)], lo, hi)


def encode_image(x: np.ndarray, model: CodecModel, levels: QualityLevelSet | None = None, opts: EncodeOptions = EncodeOptions()) -> EncodeResult:
    """Pad, analyse, select the allocation, quantize and range-code one image."""
    plan = plan_encode(x, model, levels, opts)
    q = plan.q
    keep_z = q.hmask.astype(bool)
    keep_y = q.mask.astype(bool)
    z_syms = q.z_sym[0][keep_z]
    y_syms = q.y_sym[0][np.broadcast_to(keep_y, q.y_sym.shape[1:])]
    z_range = _symbol_range(z_syms)
    y_range = _symbol_range(y_syms)
    z_payload = range_encode(z_syms.tolist(), _z_tables(model, q.hmask, *z_range))
    y_payload = range_encode(y_syms.tolist(), _y_tables(q.sigma, q.mask, *y_range))
    alloc_payload = pack_allocation(plan.allocation) if plan.cacd else b""
    h, w = plan.x.shape[2:]
    header = Header(
        width=w,
        height=h,
        lambda_index=model.config.lambda_index,
        widths=plan.levels.widths,
        y_range=y_range,
        z_range=z_range,
        payload_lengths=(len(alloc_payload), len(z_payload), len(y_payload)),
        cacd=plan.cacd,
        caft=model.config.caft,
    )
    stream = Bitstream(header, alloc_payload, z_payload, y_payload)
    return EncodeResult(
        bitstream=stream,
        data=stream.to_bytes(),
        x_hat=plan.x_hat,
        recon_hash=reconstruction_hash(plan.x_hat),
        estimated_bits=estimated_bits(model, plan),
        allocation=plan.allocation,
        psnr=psnr(plan.x, plan.x_hat),
    )


@dataclass
class DecodeResult:
    x_hat: np.ndarray
    header: Header
    allocation: np.ndarray
    recon_hash: str = field(init=False)

    def __post_init__(self):
        self.recon_hash = reconstruction_hash(self.x_hat)


def check_model(header: Header, model: CodecModel):
    cfg = model.config
    if header.lambda_index != cfg.lambda_index:
        raise ModelMismatchError(
            "lambda_index", f"stream was coded at registry index {header.lambda_index}, model has index {cfg.lambda_index}"
        )
    if header.caft != cfg.caft:
        raise ModelMismatchError("flags", f"stream CAFT={header.caft}, model CAFT={cfg.caft}")
    if header.widths[0] != cfg.m:
        raise ModelMismatchError("widths", f"stream level 0 width {header.widths[0]}, model has M={cfg.m}")
    if header.cacd and not cfg.masking:
        raise ModelMismatchError("flags", "stream uses channel dropping but the model has N != M")


def _decode_payload(payload: bytes, tables, name: str, base: int) -> list[int]:
    try:
        return range_decode(payload, tables)
    except RangeCoderError as exc:
        pos = getattr(exc, "offset", None)
        raise TruncatedError(name, str(exc), base if pos is None else base + pos) from exc


def decode_image(data: bytes, model: CodecModel) -> DecodeResult:
    """Parse, validate and reconstruct; output is cropped to the true size and clamped to [0, 1]."""
    stream = Bitstream.from_bytes(data)
    header = stream.header
    if not header.mean_shift:
        raise BitstreamError("flags", "only mean-shifted quantization is supported")
    check_model(header, model)
    ph, pw = inf.padded_size(header.height, header.width)
    latent_hw = (ph // inf.LATENT_FACTOR, pw // inf.LATENT_FACTOR)
    m = model.config.m
    base = header.size
    if header.cacd:
        expected = allocation_bytes(*latent_hw)
        if len(stream.allocation) != expected:
            raise BitstreamError("allocation", f"{len(stream.allocation)} bytes, expected {expected}", base)
        alloc = unpack_allocation(stream.allocation, latent_hw)
        if alloc.max() >= header.k:
            raise BitstreamError("allocation", f"level code {alloc.max()} >= K={header.k}", base)
    else:
        if stream.allocation:
            raise BitstreamError("allocation", "allocation payload present without the CACD flag", base)
        alloc = np.zeros(latent_hw, np.int64)
    mask = inf.allocation_mask(alloc, header.widths, m)
    hmask = inf.hyper_mask(mask)
    keep_z = hmask.astype(bool)
    keep_y = mask.astype(bool)

    base += len(stream.allocation)
    z_sym = np.zeros((1, *hmask.shape), np.int64)
    z_vals = _decode_payload(stream.z_payload, _z_tables(model, hmask, *header.z_range), "z_payload", base)
    z_sym[0][keep_z] = z_vals
    z_hat = inf.dequantize_z(z_sym, model.prior.loc.data, hmask)

    base += len(stream.z_payload)
    mu, sigma = inf.entropy_parameters(model, z_hat)
    y_sym = np.zeros(mu.shape, np.int64)
    y_vals = _decode_payload(stream.y_payload, _y_tables(sigma, mask, *header.y_range), "y_payload", base)
    y_sym[0][keep_y] = y_vals
    y_hat = inf.dequantize_y(y_sym, mu, mask)

    x_hat = _finish(inf.reconstruct(model, y_hat, z_hat), (1, 3, header.height, header.width))
    return DecodeResult(x_hat, header, alloc)


@dataclass
class RdEstimate:
    bpp: float
    psnr: float
    bits: float
    x_hat: np.ndarray
    allocation: np.ndarray


def simulate_rd(x: np.ndarray, model: CodecModel, levels: QualityLevelSet | None = None, opts: EncodeOptions = EncodeOptions()) -> RdEstimate:
    """Same decisions and reconstruction as :func:`encode_image`, with the rate taken from the model."""
    plan = plan_encode(x, model, levels, opts)
    bits = estimated_bits(model, plan)
    return RdEstimate(bits / plan.pixels, psnr(plan.x, plan.x_hat), bits, plan.x_hat, plan.allocation)

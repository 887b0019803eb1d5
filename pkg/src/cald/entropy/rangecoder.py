"""Byte-oriented range coder over quantized CDF tables.

The encoder keeps a 33-bit ``low`` (the extra bit holds a pending carry) and
a 32-bit ``range``; carries are resolved through a one-byte cache plus a run
count of 0xFF bytes, so output is emitted strictly left to right.  All
frequency tables share a total of ``2**PRECISION``.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
# raw escape payloads are written in chunks of this many bits
_RAW_CHUNK = PRECISION


class RangeCoderError(ValueError):
    """Malformed or truncated range-coded payload; ``offset`` is the byte position within it."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class QuantizedCdf:
    """Cumulative frequencies for symbols ``offset .. offset + n - 1`` plus an escape bin.

    ``cdf`` has ``n + 2`` entries, starts at 0 and ends at ``TOTAL``; the last
    bin (``cdf[n] .. cdf[n + 1]``) is the escape symbol.
    """

    cdf: tuple[int, ...]
    offset: int

    @property
    def num_regular(self) -> int:
        return len(self.cdf) - 2


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            out = self._out
            temp = self._cache
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low << 8) & _MASK32

    def encode(self, start: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw(self, value: int, nbits: int):
        """Write ``nbits`` uniformly distributed bits (most significant chunk first)."""
        chunks = []
        while nbits > 0:
            take = min(nbits, _RAW_CHUNK)
            nbits -= take
            chunks.append(((value >> nbits) & ((1 << take) - 1), take))
        for chunk, take in chunks:
            scale = 1 << (PRECISION - take)
            self.encode(chunk * scale, scale)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._next_byte()
        self.code &= _MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise RangeCoderError(
                f"range-coded payload exhausted at byte offset {self._pos} of {len(self._data)}", self._pos
            )
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def position(self) -> int:
        return self._pos

    def decode(self, cdf: Sequence[int]) -> int:
        """Decode one bin index from cumulative table ``cdf``."""
        r = self.range >> PRECISION
        value = self.code // r
        if value >= TOTAL:
            raise RangeCoderError(f"inconsistent range-coder state near byte offset {self._pos}", self._pos)
        idx = bisect_right(cdf, value) - 1
        lo = cdf[idx]
        self.code -= r * lo
        self.range = r * (cdf[idx + 1] - lo)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8
        return idx

    def decode_raw(self, nbits: int) -> int:
        value = 0
        while nbits > 0:
            take = min(nbits, _RAW_CHUNK)
            nbits -= take
            scale = 1 << (PRECISION - take)
            r = self.range >> PRECISION
            chunk = min(self.code // r // scale, (1 << take) - 1)
            self.code -= r * chunk * scale
            self.range = r * scale
            while self.range < _TOP:
                self.code = ((self.code << 8) | self._next_byte()) & _MASK32
                self.range <<= 8
            value = (value << take) | chunk
        return value


def _encode_escape(enc: RangeEncoder, value: int):
    # zigzag, then a 6-bit length prefix and the magnitude bits
    z = (value << 1) if value >= 0 else ((-value << 1) - 1)
    nbits = z.bit_length()
    enc.encode_raw(nbits, 6)
    enc.encode_raw(z, nbits)


def _decode_escape(dec: RangeDecoder) -> int:
    nbits = dec.decode_raw(6)
    z = dec.decode_raw(nbits)
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def range_encode(symbols: Sequence[int], cdfs: Sequence[QuantizedCdf]) -> bytes:
    """Encode ``symbols[i]`` under ``cdfs[i]``; out-of-table values go through the escape bin."""
    if len(symbols) != len(cdfs):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} CDF tables")
    if not symbols:
        return b""
    enc = RangeEncoder()
    # inlined RangeEncoder.encode for the hot loop
    for s, table in zip(symbols, cdfs):
        cdf = table.cdf
        idx = s - table.offset
        n = len(cdf) - 2
        escape = idx < 0 or idx >= n
        if escape:
            idx = n
        start = cdf[idx]
        r = enc.range >> PRECISION
        enc.low += r * start
        enc.range = r * (cdf[idx + 1] - start)
        while enc.range < _TOP:
            enc.range <<= 8
            enc._shift_low()
        if escape:
            _encode_escape(enc, s)
    return enc.finish()


def range_decode(data: bytes, cdfs: Sequence[QuantizedCdf]) -> list[int]:
    """Inverse of :func:`range_encode` given the identical CDF sequence."""
    if not cdfs:
        if data:
            raise RangeCoderError(f"{len(data)} trailing bytes for an empty symbol sequence", 0)
        return []
    dec = RangeDecoder(data)
    out = []
    append = out.append
    for table in cdfs:
        cdf = table.cdf
        idx = dec.decode(cdf)
        if idx == len(cdf) - 2:
            append(_decode_escape(dec))
        else:
            append(idx + table.offset)
    if dec.position != len(data):
        raise RangeCoderError(
            f"range-coded payload has {len(data) - dec.position} unread bytes at offset {dec.position}",
            dec.position,
        )
    return out

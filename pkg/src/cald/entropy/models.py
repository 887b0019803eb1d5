"""Quantization, probability models and differentiable rate estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .. import tensor as T
from ..tensor import Tensor
from .rangecoder import PRECISION, TOTAL, QuantizedCdf

SIGMA_FLOOR = 0.11
TAIL_MASS = 1e-9
SCALE_FLOOR = 1e-3
# smallest probability a coded symbol can receive from a quantized table; the
# rate estimate uses the same floor so estimated and coded bits agree in the tails
LIKELIHOOD_BOUND = 2.0**-PRECISION
_INV_LN2 = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class GaussianConditional:
    sigma_floor: float = SIGMA_FLOOR
    precision: int = PRECISION
    tail_mass: float = TAIL_MASS


# -- quantization ---------------------------------------------------------

def quantize_noise(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Training proxy for rounding: y + U(-0.5, 0.5) with identity gradient."""
    u = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
    return T.add(y, Tensor(u))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_round(y: np.ndarray, mu: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
    """Mean-shifted rounding: returns (y_hat, integer symbols) with y_hat = symbols + mu."""
    y = np.asarray(y)
    if not np.all(np.isfinite(y)):
        raise ValueError("quantize_round: non-finite input")
    mu = np.asarray(mu, dtype=y.dtype)
    if mu.shape != () and mu.shape != y.shape:
        mu = np.broadcast_to(mu, y.shape)
    sym = round_half_away(y - mu)
    y_hat = (sym + mu).astype(y.dtype)
    return y_hat, sym.astype(np.int64)


# -- rate models (differentiable) ----------------------------------------

def _bits_from_likelihood(p: Tensor, bound: float) -> Tensor:
    if bound > 0:
        p = T.clampmin(p, bound)
    return T.mul(T.log(p), -_INV_LN2)


def gaussian_likelihood(v: Tensor, mu: Tensor, sigma: Tensor, sigma_floor: float | None = SIGMA_FLOOR) -> Tensor:
    """P(bin of width 1 centred on v) under N(mu, sigma^2), evaluated in the upper-tail-free form."""
    if sigma_floor:
        sigma = T.clampmin(sigma, sigma_floor)
    d = T.abs(T.sub(v, mu))
    upper = T.normal_cdf(T.div(T.sub(0.5, d), sigma))
    lower = T.normal_cdf(T.div(T.sub(-0.5, d), sigma))
    return T.sub(upper, lower)


def gaussian_bits(
    v: Tensor,
    mu: Tensor,
    sigma: Tensor,
    sigma_floor: float | None = SIGMA_FLOOR,
    likelihood_bound: float = LIKELIHOOD_BOUND,
) -> Tensor:
    """Elementwise -log2 P(v | mu, sigma) for unit-width bins."""
    return _bits_from_likelihood(gaussian_likelihood(v, mu, sigma, sigma_floor), likelihood_bound)


def logistic_likelihood(v: Tensor, loc: Tensor, scale: Tensor) -> Tensor:
    """Unit-bin probability under a logistic density; loc/scale may be per-channel vectors."""
    d = T.abs(T.sub(v, loc))
    upper = T.sigmoid(T.div(T.sub(0.5, d), scale))
    lower = T.sigmoid(T.div(T.sub(-0.5, d), scale))
    return T.sub(upper, lower)


def factorized_bits(v: Tensor, loc: Tensor, scale: Tensor, likelihood_bound: float = LIKELIHOOD_BOUND) -> Tensor:
    return _bits_from_likelihood(logistic_likelihood(v, loc, scale), likelihood_bound)


def gaussian_bits_exact(v, mu, sigma) -> np.ndarray:
    """Unbounded float64 bit cost computed in the log domain (finite for any input)."""
    v, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (v, mu, sigma))
    d = np.abs(v - mu)
    log_upper = special.log_ndtr((0.5 - d) / sigma)
    log_lower = special.log_ndtr((-0.5 - d) / sigma)
    return -(log_upper + np.log1p(-np.exp(log_lower - log_upper))) * _INV_LN2


def logistic_bits_exact(v, loc, scale) -> np.ndarray:
    v, loc, scale = (np.asarray(a, dtype=np.float64) for a in (v, loc, scale))
    d = np.abs(v - loc)
    log_upper = -np.logaddexp(0.0, -(0.5 - d) / scale)
    log_lower = -np.logaddexp(0.0, -(-0.5 - d) / scale)
    return -(log_upper + np.log1p(-np.exp(log_lower - log_upper))) * _INV_LN2


class FactorizedPrior:
    """Per-channel logistic density over the hyperprior.

    The scale is parameterised as softplus(raw) + SCALE_FLOOR so it never
    drops below the floor.
    """

    def __init__(self, channels: int, loc=None, raw_scale=None):
        self.channels = channels
        self.loc = Tensor(np.zeros(channels, np.float32) if loc is None else loc, requires_grad=True)
        init_raw = math.log(math.expm1(1.0 - SCALE_FLOOR))
        raw = np.full(channels, init_raw, np.float32) if raw_scale is None else raw_scale
        self.raw_scale = Tensor(raw, requires_grad=True)

    def scale(self) -> Tensor:
        return T.add(T.softplus(self.raw_scale), SCALE_FLOOR)

    def bits(self, v: Tensor, likelihood_bound: float = LIKELIHOOD_BOUND) -> Tensor:
        if v.shape[1] != self.channels:
            raise ValueError(f"factorized prior has {self.channels} channels, input {v.shape}")
        return factorized_bits(v, self.loc, self.scale(), likelihood_bound)


# -- quantized CDF construction ------------------------------------------

def _quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies (rows sum to TOTAL, every bin >= 1) from rows of probabilities."""
    nbins = pmf.shape[1]
    pmf = np.maximum(pmf, 0.0)
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    freq = 1 + np.floor(pmf * (TOTAL - nbins)).astype(np.int64)
    deficit = TOTAL - freq.sum(axis=1)
    # remaining mass goes to the most probable bin of each row
    rows = np.arange(pmf.shape[0])
    freq[rows, pmf.argmax(axis=1)] += deficit
    return freq


def _to_tables(freq: np.ndarray, offset: int) -> list[QuantizedCdf]:
    cum = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return [QuantizedCdf(tuple(row), offset) for row in cum.tolist()]


def gaussian_cdfs(sigma: np.ndarray, lo: int, hi: int, sigma_floor: float = SIGMA_FLOOR) -> list[QuantizedCdf]:
    """One table per element for mean-shifted symbols lo..hi under N(0, sigma^2).

    Mass outside [lo - 0.5, hi + 0.5] (plus TAIL_MASS) feeds the escape bin.
    """
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).ravel(), sigma_floor)
    s = np.arange(lo, hi + 1, dtype=np.float64)
    edges = np.concatenate([s - 0.5, [hi + 0.5]])
    cdf = special.ndtr(edges[None, :] / sigma[:, None])
    pmf = np.diff(cdf, axis=1)
    escape = cdf[:, :1] + (1.0 - cdf[:, -1:]) + TAIL_MASS
    return _to_tables(_quantize_pmf(np.concatenate([pmf, escape], axis=1)), lo)


def logistic_cdfs(scale: np.ndarray, lo: int, hi: int) -> list[QuantizedCdf]:
    """One table per channel for mean-shifted symbols lo..hi (v - loc) under logistic(0, scale)."""
    scale = np.asarray(scale, dtype=np.float64).ravel()
    s = np.arange(lo, hi + 1, dtype=np.float64)
    edges = np.concatenate([s - 0.5, [hi + 0.5]])
    cdf = special.expit(edges[None, :] / scale[:, None])
    pmf = np.diff(cdf, axis=1)
    escape = cdf[:, :1] + (1.0 - cdf[:, -1:]) + TAIL_MASS
    return _to_tables(_quantize_pmf(np.concatenate([pmf, escape], axis=1)), lo)


def quantized_bits(symbols, tables: list[QuantizedCdf]) -> float:
    """Ideal code length (bits) of ``symbols`` under quantized tables, escapes excluded."""
    total = 0.0
    for s, t in zip(symbols, tables):
        idx = s - t.offset
        if 0 <= idx < t.num_regular:
            total -= math.log2((t.cdf[idx + 1] - t.cdf[idx]) / TOTAL)
    return total

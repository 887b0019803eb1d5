"""Hard-quantized forward path shared by the encoder, the decoder and RD selection.

Everything here runs without graph recording and with batch size 1, so the
encoder-side simulation and the decoder execute identical float operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .entropy.models import LIKELIHOOD_BOUND, gaussian_bits, quantize_round
from .model import PAD_MULTIPLE, CodecModel
from .tensor import Tensor, no_grad

HYPER_FACTOR = 4
LATENT_FACTOR = 16


def padded_size(h: int, w: int) -> tuple[int, int]:
    ph = -(-h // PAD_MULTIPLE) * PAD_MULTIPLE
    pw = -(-w // PAD_MULTIPLE) * PAD_MULTIPLE
    return ph, pw


def pad_image(x: np.ndarray) -> np.ndarray:
    """Replicate-pad a [1,3,H,W] array to multiples of PAD_MULTIPLE."""
    h, w = x.shape[2:]
    if h == 0 or w == 0:
        raise ValueError("image has zero area")
    ph, pw = padded_size(h, w)
    if (ph, pw) == (h, w):
        return x
    return ops.pad_replicate(Tensor(x), 0, ph - h, 0, pw - w).data


def level_mask(width: int, m: int, latent_hw: tuple[int, int]) -> np.ndarray:
    """Mask [M, h, w] keeping the first ``width`` channels everywhere."""
    if not 0 < width <= m:
        raise ValueError(f"channel width {width} outside 1..{m}")
    mask = np.zeros((m, *latent_hw), dtype=np.float32)
    mask[:width] = 1.0
    return mask


def hyper_mask(mask: np.ndarray) -> np.ndarray:
    """Spatial max-pool (factor 4) of a latent mask: keep a hyper channel if any covered location keeps it."""
    return ops.maxpool2d(Tensor(mask[None]), HYPER_FACTOR).data[0]


def allocation_mask(allocation: np.ndarray, widths, m: int) -> np.ndarray:
    """Adaptation mask [M, h, w] from a per-location level index matrix."""
    w = np.asarray(widths)[allocation]  # (h, w)
    return (np.arange(m)[:, None, None] < w[None]).astype(np.float32)


@dataclass
class QuantizedLatents:
    y_hat: np.ndarray  # [1, M, h, w], zero outside the mask
    z_hat: np.ndarray  # [1, N, h/4, w/4], zero outside the hyper mask
    y_sym: np.ndarray  # int64, same shape as y_hat
    z_sym: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    mask: np.ndarray  # [M, h, w]
    hmask: np.ndarray  # [N, h/4, w/4]


def analyze(model: CodecModel, x_padded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        y = model.analyze(Tensor(x_padded))
        z = model.hyper_analyze(y)
    return y.data, z.data


def quantize(model: CodecModel, y: np.ndarray, z: np.ndarray, mask: np.ndarray) -> QuantizedLatents:
    """Mean-shifted rounding of z then y under ``mask``; mu/sigma come from the masked z_hat."""
    hm = hyper_mask(mask)
    loc = model.prior.loc.data.reshape(1, -1, 1, 1)
    z_hat_full, z_sym = quantize_round(z, np.broadcast_to(loc, z.shape))
    z_hat = (z_hat_full * hm[None]).astype(z.dtype)
    z_sym = z_sym * hm[None].astype(np.int64)
    mu, sigma = entropy_parameters(model, z_hat)
    y_hat_full, y_sym = quantize_round(y, mu)
    y_hat = (y_hat_full * mask[None]).astype(y.dtype)
    y_sym = y_sym * mask[None].astype(np.int64)
    return QuantizedLatents(y_hat, z_hat, y_sym, z_sym, mu, sigma, mask, hm)


def entropy_parameters(model: CodecModel, z_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        mu, sigma = model.entropy_parameters(Tensor(z_hat))
    return mu.data, sigma.data


def dequantize_y(y_sym: np.ndarray, mu: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Decoder-side y_hat; identical arithmetic to :func:`quantize`."""
    return ((y_sym.astype(mu.dtype) + mu) * mask[None]).astype(mu.dtype)


def dequantize_z(z_sym: np.ndarray, loc: np.ndarray, hmask: np.ndarray) -> np.ndarray:
    loc = np.broadcast_to(loc.reshape(1, -1, 1, 1), z_sym.shape)
    return ((z_sym.astype(loc.dtype) + loc) * hmask[None]).astype(loc.dtype)


def reconstruct(model: CodecModel, y_hat: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
    """Unclamped decoder output for the padded image."""
    with no_grad():
        return model.decode_latents(Tensor(y_hat), Tensor(z_hat)).data


def y_bits_map(q: QuantizedLatents, bound: float = LIKELIHOOD_BOUND) -> np.ndarray:
    """Estimated bits of each kept y element, [M, h, w] (zero where masked)."""
    with no_grad():
        bits = gaussian_bits(Tensor(q.y_hat), Tensor(q.mu), Tensor(q.sigma), likelihood_bound=bound).data
    return (bits[0] * q.mask).astype(np.float64)


def z_bits_map(model: CodecModel, q: QuantizedLatents, bound: float = LIKELIHOOD_BOUND) -> np.ndarray:
    with no_grad():
        bits = model.prior.bits(Tensor(q.z_hat), likelihood_bound=bound).data
    return (bits[0] * q.hmask).astype(np.float64)


def block_mse(x: np.ndarray, x_hat: np.ndarray, block: int = LATENT_FACTOR) -> np.ndarray:
    """Per-block MSE over all colour channels: [H/block, W/block]."""
    diff = np.asarray(x, np.float64)[0] - np.asarray(x_hat, np.float64)[0]
    c, h, w = diff.shape
    sq = (diff * diff).reshape(c, h // block, block, w // block, block)
    return sq.mean(axis=(0, 2, 4))

"""Content-adaptive channel dropping.

Quality levels are realised inside one model by zeroing latent channels past a
level's width.  Training sums the RD loss over levels; at encode time each
latent location picks the level with the smallest local RD value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import inference as inf
from . import ops
from . import tensor as T
from .entropy.models import gaussian_bits, quantize_noise
from .model import CodecModel, QualityLevelSet
from .tensor import ShapeError, Tensor

BLOCK = inf.LATENT_FACTOR
BLOCK_PIXELS = BLOCK * BLOCK
PSNR_CAP = 100.0

make_level_mask = inf.level_mask
allocation_mask = inf.allocation_mask


def apply_masks(y_hat: Tensor, z_hat: Tensor, mask: np.ndarray, n_channels: int | None = None):
    """(y_hat * m, z_hat * maxpool4(m)); ``mask`` is [M, h, w] or [B, M, h, w]."""
    m = mask if mask.ndim == 4 else mask[None]
    if y_hat.shape[1] != m.shape[1] or y_hat.shape[2:] != m.shape[2:]:
        raise ShapeError(f"mask {m.shape} does not match latents {y_hat.shape}")
    if z_hat.shape[1] != y_hat.shape[1]:
        raise ShapeError(f"channel masking needs N == M, got N={z_hat.shape[1]}, M={y_hat.shape[1]}")
    hm = ops.maxpool2d(Tensor(m), inf.HYPER_FACTOR).data
    m_full = np.broadcast_to(m, y_hat.shape).astype(y_hat.dtype)
    hm_full = np.broadcast_to(hm, z_hat.shape).astype(z_hat.dtype)
    return T.mul(y_hat, Tensor(m_full)), T.mul(z_hat, Tensor(hm_full))


# -- training objective -----------------------------------------------------

@dataclass
class LevelTerms:
    rate: Tensor  # bits per pixel
    mse: Tensor  # on [0, 1] pixels
    x_hat: Tensor


def level_terms(model: CodecModel, x: Tensor, y_tilde: Tensor, z_tilde: Tensor, mask: np.ndarray | None) -> LevelTerms:
    """Rate and distortion of one quality level from noisy latents (differentiable)."""
    b, _, h, w = x.shape
    if mask is None:
        y_a, z_a = y_tilde, z_tilde
        m_full = hm_full = None
    else:
        y_a, z_a = apply_masks(y_tilde, z_tilde, mask)
        m = mask if mask.ndim == 4 else mask[None]
        m_full = Tensor(np.broadcast_to(m, y_tilde.shape).astype(y_tilde.dtype))
        hm_full = Tensor(
            np.broadcast_to(ops.maxpool2d(Tensor(m), inf.HYPER_FACTOR).data, z_tilde.shape).astype(z_tilde.dtype)
        )
    mu, sigma = model.entropy_parameters(z_a)
    y_bits = gaussian_bits(y_tilde, mu, sigma)
    z_bits = model.prior.bits(z_tilde)
    if m_full is not None:
        y_bits = T.mul(y_bits, m_full)
        z_bits = T.mul(z_bits, hm_full)
    rate = T.div(T.add(T.sum_all(y_bits), T.sum_all(z_bits)), float(b * h * w))
    x_hat = model.decode_latents(y_a, z_a)
    mse = T.mean_all(T.square(T.sub(x_hat, x)))
    return LevelTerms(rate, mse, x_hat)


@dataclass
class MrdoResult:
    loss: Tensor
    terms: list[LevelTerms] = field(default_factory=list)
    adapted: LevelTerms | None = None  # mixed-allocation term, CACD phase only

    def rates(self) -> list[float]:
        return [float(t.rate.data) for t in self.terms]

    def psnrs(self) -> list[float]:
        return [psnr_from_mse(float(t.mse.data)) for t in self.terms]


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class _NoisyPass:
    result: MrdoResult
    y_tilde: Tensor
    z_tilde: Tensor


def _multi_level(x: Tensor, model: CodecModel, levels: QualityLevelSet, rng: np.random.Generator, y: Tensor, z: Tensor) -> _NoisyPass:
    z_tilde = quantize_noise(z, rng)
    y_tilde = quantize_noise(y, rng)
    latent_hw = y.shape[2:]
    m = model.config.m
    terms = []
    loss = None
    for lam, width in zip(levels.lambdas, levels.widths):
        mask = None if width == m else inf.level_mask(width, m, latent_hw)
        if mask is not None and not model.config.masking:
            raise ShapeError("channel masking requires N == M")
        t = level_terms(model, x, y_tilde, z_tilde, mask)
        term = T.add(t.rate, T.mul(t.mse, float(lam)))
        loss = term if loss is None else T.add(loss, term)
        terms.append(t)
    return _NoisyPass(MrdoResult(loss, terms), y_tilde, z_tilde)


def mrdo_loss(x: Tensor, model: CodecModel, levels: QualityLevelSet, rng: np.random.Generator) -> MrdoResult:
    """sum over levels of R(y^g, z^g) + lambda * MSE(x, x_hat^g) with noise quantization.

    A single level of full width needs no mask and reduces to the plain RD loss.
    """
    y = model.analyze(x)
    return _multi_level(x, model, levels, rng, y, model.hyper_analyze(y)).result


def cacd_loss(x: Tensor, model: CodecModel, levels: QualityLevelSet, rng: np.random.Generator) -> MrdoResult:
    """The multi-level loss plus R + lambda_target * MSE under each image's selected allocation.

    Allocations come from :func:`select_allocation` on the hard-quantized
    latents of the current weights, so the decoder trains on the mixed masks
    it will see at deployment.  No gradient flows through the selection.
    """
    y = model.analyze(x)
    z = model.hyper_analyze(y)
    masks = np.stack([
        select_allocation(x.data[i : i + 1], model, levels, y.data[i : i + 1], z.data[i : i + 1]).mask
        for i in range(x.shape[0])
    ])
    base = _multi_level(x, model, levels, rng, y, z)
    adapted = level_terms(model, x, base.y_tilde, base.z_tilde, masks)
    loss = T.add(base.result.loss, T.add(adapted.rate, T.mul(adapted.mse, float(levels.target))))
    return MrdoResult(loss, base.result.terms, adapted)


# -- block-based RD selection ----------------------------------------------

def choose_levels(rate_maps: np.ndarray, dist_maps: np.ndarray, lmbda: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-location argmin of rate/BLOCK_PIXELS + lmbda * dist over K levels.

    ``rate_maps`` are bits per latent location, ``dist_maps`` block MSEs, both
    [K, h, w] with level 0 the widest.  Ties resolve to the narrower level.
    Returns (allocation [h, w], objective maps [K, h, w]).
    """
    objective = np.asarray(rate_maps, np.float64) / BLOCK_PIXELS + lmbda * np.asarray(dist_maps, np.float64)
    k = objective.shape[0]
    # reversed scan so the first minimum found is the narrowest level
    rev = objective[::-1]
    alloc = (k - 1) - rev.argmin(axis=0)
    return alloc.astype(np.int64), objective


def enumerate_best_allocation(objective: np.ndarray) -> tuple[np.ndarray, float]:
    """Exhaustive search over all K^(h*w) allocations of the summed objective (tiny maps only)."""
    k, h, w = objective.shape
    flat = objective.reshape(k, h * w)
    best, best_val = None, math.inf
    for combo in itertools.product(range(k), repeat=h * w):
        val = float(sum(flat[c, i] for i, c in enumerate(combo)))
        narrower = best is not None and val == best_val and sum(combo) > sum(best)
        if val < best_val or narrower:
            best, best_val = combo, val
    return np.array(best, dtype=np.int64).reshape(h, w), best_val


@dataclass
class LevelDiagnostics:
    rate_map: np.ndarray  # y bits per latent location
    z_bits: float
    dist_map: np.ndarray  # block MSE
    x_hat: np.ndarray  # clamped reconstruction (padded frame)
    z_bits_map: np.ndarray | None = None


@dataclass
class Selection:
    allocation: np.ndarray  # [h, w] level indices
    mask: np.ndarray  # adaptation mask [M, h, w]
    objective: np.ndarray  # [K, h, w]
    levels: list[LevelDiagnostics]


def uniform_level(model: CodecModel, x_padded, y, z, width: int) -> LevelDiagnostics:
    """Full hard-quantized encode/decode at one uniform channel width."""
    mask = inf.level_mask(width, model.config.m, y.shape[2:])
    q = inf.quantize(model, y, z, mask)
    x_hat = np.clip(inf.reconstruct(model, q.y_hat, q.z_hat), 0.0, 1.0)
    zmap = inf.z_bits_map(model, q)
    return LevelDiagnostics(
        rate_map=inf.y_bits_map(q).sum(axis=0),
        z_bits=float(zmap.sum()),
        dist_map=inf.block_mse(x_padded, x_hat),
        x_hat=x_hat,
        z_bits_map=zmap,
    )


def select_allocation(x_padded: np.ndarray, model: CodecModel, levels: QualityLevelSet | None = None, y=None, z=None) -> Selection:
    """Choose one quality level per latent location by local RD cost at the target lambda."""
    levels = levels or model.levels
    if x_padded.shape[2] % inf.PAD_MULTIPLE or x_padded.shape[3] % inf.PAD_MULTIPLE:
        raise ShapeError(f"select_allocation needs a padded image, got {x_padded.shape}")
    if levels.k > 1 and not model.config.masking:
        raise ShapeError("channel masking requires N == M")
    if y is None or z is None:
        y, z = inf.analyze(model, x_padded)
    diags = [uniform_level(model, x_padded, y, z, w) for w in levels.widths]
    rate_maps = np.stack([d.rate_map for d in diags])
    dist_maps = np.stack([d.dist_map for d in diags])
    alloc, objective = choose_levels(rate_maps, dist_maps, levels.target)
    mask = inf.allocation_mask(alloc, levels.widths, model.config.m)
    return Selection(alloc, mask, objective, diags)


# -- bit conversion ratio --------------------------------------------------

def block_psnr(x: np.ndarray, x_hat: np.ndarray, block: int = BLOCK) -> np.ndarray:
    mse = inf.block_mse(x, x_hat, block)
    with np.errstate(divide="ignore"):
        p = 10.0 * np.log10(1.0 / mse)
    return np.minimum(np.where(mse > 0, p, PSNR_CAP), PSNR_CAP)


def bit_conversion_ratio(
    x: np.ndarray,
    x_low: np.ndarray,
    bits_low: np.ndarray,
    x_high: np.ndarray,
    bits_high: np.ndarray,
    block: int = BLOCK,
    min_rate_gap: float = 1e-6,
) -> np.ndarray:
    """Per-block PSNR gain per extra bpp between a low- and a high-rate reconstruction.

    ``bits_*`` are bits attributed to each block ([H/block, W/block]).  Blocks
    whose rate gap is below ``min_rate_gap`` bpp are NaN.
    """
    if x.shape != x_low.shape or x.shape != x_high.shape:
        raise ShapeError(f"image shapes differ: {x.shape}, {x_low.shape}, {x_high.shape}")
    grid = (x.shape[2] // block, x.shape[3] // block)
    if bits_low.shape != grid or bits_high.shape != grid:
        raise ShapeError(f"rate maps must be {grid}, got {bits_low.shape}, {bits_high.shape}")
    d_psnr = block_psnr(x, x_high, block) - block_psnr(x, x_low, block)
    d_rate = (np.asarray(bits_high, np.float64) - np.asarray(bits_low, np.float64)) / (block * block)
    eta = np.full(grid, np.nan)
    ok = np.abs(d_rate) >= min_rate_gap
    eta[ok] = d_psnr[ok] / d_rate[ok]
    return eta


def block_bits(diag: LevelDiagnostics, block: int = BLOCK) -> np.ndarray:
    """y bits per location plus each hyper cell's z bits spread evenly over its locations, pooled to ``block``."""
    per_loc = diag.rate_map.copy()
    if diag.z_bits_map is not None:
        zcell = diag.z_bits_map.sum(axis=0) / inf.HYPER_FACTOR**2
        per_loc += np.kron(zcell, np.ones((inf.HYPER_FACTOR, inf.HYPER_FACTOR)))
    f = block // BLOCK
    if f < 1 or block % BLOCK:
        raise ValueError(f"block must be a multiple of {BLOCK}")
    h, w = per_loc.shape
    return per_loc.reshape(h // f, f, w // f, f).sum(axis=(1, 3))


def eta_map(x_padded: np.ndarray, model_low: CodecModel, model_high: CodecModel | None = None, block: int = BLOCK):
    """Bit-conversion-ratio map between two models, or between one model's narrowest and widest levels."""
    if model_high is None:
        y, z = inf.analyze(model_low, x_padded)
        widths = model_low.levels.widths
        low = uniform_level(model_low, x_padded, y, z, widths[-1])
        high = uniform_level(model_low, x_padded, y, z, widths[0])
    else:
        yl, zl = inf.analyze(model_low, x_padded)
        yh, zh = inf.analyze(model_high, x_padded)
        low = uniform_level(model_low, x_padded, yl, zl, model_low.config.m)
        high = uniform_level(model_high, x_padded, yh, zh, model_high.config.m)
    return bit_conversion_ratio(
        x_padded, low.x_hat, block_bits(low, block), high.x_hat, block_bits(high, block), block
    )

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cald import cacd
from cald import inference as inf
from cald import tensor as T
from cald.entropy.models import gaussian_bits, quantize_noise
from cald.model import CodecModel, ModelConfig, QualityLevelSet
from cald.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def model():
    return CodecModel(ModelConfig(n=8, m=8, c=4, seed=1))


def rand_image(seed, h=64, w=64):
    return np.random.default_rng(seed).uniform(0, 1, (1, 3, h, w)).astype(np.float32)


# -- masks ---------------------------------------------------------------------

def test_level_mask_examples():
    assert cacd.make_level_mask(4, 4, (3, 5)).all()
    assert cacd.make_level_mask(1, 4, (3, 5)).sum() == 15
    for bad in (0, 5):
        with pytest.raises(ValueError):
            cacd.make_level_mask(bad, 4, (2, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.data())
def test_level_masks_nest(m, data):
    a = data.draw(st.integers(1, m))
    b = data.draw(st.integers(a, m))
    lo, hi = cacd.make_level_mask(a, m, (2, 3)), cacd.make_level_mask(b, m, (2, 3))
    assert np.all(lo <= hi)
    assert set(np.unique(lo)) <= {0.0, 1.0}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 4))
def test_allocation_mask_columns_are_level_columns(seed, hb, wb):
    rng = np.random.default_rng(seed)
    widths = (12, 9, 6)
    alloc = rng.integers(0, 3, (4 * hb, 4 * wb))
    mask = cacd.allocation_mask(alloc, widths, 12)
    for i, j in itertools.product(range(alloc.shape[0]), range(alloc.shape[1])):
        np.testing.assert_array_equal(mask[:, i, j], cacd.make_level_mask(widths[alloc[i, j]], 12, (1, 1))[:, 0, 0])
    assert mask.sum() == sum(widths[a] for a in alloc.ravel())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_hyper_mask_is_block_max(seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((5, 8, 12)) < 0.1).astype(np.float32)
    hm = inf.hyper_mask(mask)
    assert hm.shape == (5, 2, 3)
    for c, i, j in itertools.product(range(5), range(2), range(3)):
        assert hm[c, i, j] == mask[c, 4 * i : 4 * i + 4, 4 * j : 4 * j + 4].max()


def test_apply_masks_examples():
    rng = np.random.default_rng(0)
    y = Tensor(rng.normal(size=(1, 8, 8, 8)).astype(np.float32))
    z = Tensor(rng.normal(size=(1, 8, 2, 2)).astype(np.float32))
    ya, za = cacd.apply_masks(y, z, np.ones((8, 8, 8), np.float32))
    assert np.array_equal(ya.data, y.data) and np.array_equal(za.data, z.data)
    ya, za = cacd.apply_masks(y, z, np.zeros((8, 8, 8), np.float32))
    assert not ya.data.any() and not za.data.any()
    single = np.zeros((8, 8, 8), np.float32)
    single[7, 5, 2] = 1
    ya, za = cacd.apply_masks(y, z, single)
    assert np.count_nonzero(ya.data) == 1 and ya.data[0, 7, 5, 2] == y.data[0, 7, 5, 2]
    assert np.count_nonzero(za.data) == 1 and za.data[0, 7, 1, 0] == z.data[0, 7, 1, 0]


def test_apply_masks_rejects_unaligned_channels():
    with pytest.raises(ShapeError, match="N == M"):
        cacd.apply_masks(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 6, 1, 1))), np.ones((4, 4, 4)))


# -- training objective ----------------------------------------------------------

def plain_rd(model, x, lmbda, seed):
    """Single-rate loss assembled directly from the model stages."""
    rng = np.random.default_rng(seed)
    y = model.analyze(x)
    z = model.hyper_analyze(y)
    z_t = quantize_noise(z, rng)
    y_t = quantize_noise(y, rng)
    mu, sigma = model.entropy_parameters(z_t)
    bits = T.add(T.sum_all(gaussian_bits(y_t, mu, sigma)), T.sum_all(model.prior.bits(z_t)))
    n, _, h, w = x.shape
    mse = T.mean_all(T.square(T.sub(model.decode_latents(y_t, z_t), x)))
    return float(bits.data) / (n * h * w) + lmbda * float(mse.data)


def test_single_level_reduces_to_plain_rd(model):
    x = Tensor(np.concatenate([rand_image(1), rand_image(2)]))
    levels = QualityLevelSet((512.0,), (8,))
    got = float(cacd.mrdo_loss(x, model, levels, np.random.default_rng(9)).loss.data)
    assert got == pytest.approx(plain_rd(model, x, 512.0, 9), rel=1e-6)


def test_mrdo_positive_and_finite(model):
    res = cacd.mrdo_loss(Tensor(rand_image(3)), model, model.levels, np.random.default_rng(0))
    assert np.isfinite(res.loss.data) and float(res.loss.data) > 0
    assert len(res.terms) == 3
    assert res.rates()[0] > res.rates()[2]


def test_doubling_lambdas_adds_distortion_terms(model):
    x = Tensor(rand_image(4))
    base = QualityLevelSet((400.0, 200.0, 100.0), (8, 6, 4))
    double = QualityLevelSet(tuple(2 * l for l in base.lambdas), base.widths)
    a = cacd.mrdo_loss(x, model, base, np.random.default_rng(5))
    b = cacd.mrdo_loss(x, model, double, np.random.default_rng(5))
    expected = sum(l * float(t.mse.data) for l, t in zip(base.lambdas, a.terms))
    assert float(b.loss.data) - float(a.loss.data) == pytest.approx(expected, rel=1e-4)


def test_cacd_loss_adds_selected_allocation_term(model):
    x = Tensor(np.concatenate([rand_image(6), rand_image(7)]))
    res = cacd.cacd_loss(x, model, model.levels, np.random.default_rng(3))
    plain = cacd.mrdo_loss(x, model, model.levels, np.random.default_rng(3))
    a = res.adapted
    assert float(res.loss.data) == pytest.approx(
        float(plain.loss.data) + float(a.rate.data) + model.levels.target * float(a.mse.data), rel=1e-6
    )

    # same noise draws, masks from each image's own selection
    rng = np.random.default_rng(3)
    y = model.analyze(x)
    z = model.hyper_analyze(y)
    z_t, y_t = quantize_noise(z, rng), quantize_noise(y, rng)
    masks = np.stack([cacd.select_allocation(x.data[i : i + 1], model).mask for i in range(2)])
    ref = cacd.level_terms(model, x, y_t, z_t, masks)
    assert float(a.rate.data) == float(ref.rate.data) and float(a.mse.data) == float(ref.mse.data)
    assert plain.adapted is None


# -- selection ---------------------------------------------------------------------

def test_choose_levels_ties_go_narrower():
    rate = np.zeros((3, 1, 2))
    dist = np.array([[[1.0, 2.0]], [[1.0, 1.0]], [[1.0, 3.0]]])
    alloc, _ = cacd.choose_levels(rate, dist, 1.0)
    np.testing.assert_array_equal(alloc, [[2, 1]])


def test_choose_levels_objective_units():
    rate = np.full((2, 1, 1), 256.0)
    dist = np.array([[[0.0]], [[0.5]]])
    alloc, obj = cacd.choose_levels(rate, dist, 4.0)
    np.testing.assert_allclose(obj[:, 0, 0], [1.0, 3.0])
    assert alloc[0, 0] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 2), st.integers(1, 2), st.booleans())
def test_choose_levels_matches_enumeration(seed, h, w, coarse):
    rng = np.random.default_rng(seed)
    rate = rng.integers(0, 4, (3, h, w)) * 64.0 if coarse else rng.uniform(0, 500, (3, h, w))
    dist = rng.integers(0, 3, (3, h, w)) / 64.0 if coarse else rng.uniform(0, 0.05, (3, h, w))
    alloc, obj = cacd.choose_levels(rate, dist, 32.0)
    best, best_val = cacd.enumerate_best_allocation(obj)
    np.testing.assert_array_equal(alloc, best)
    chosen = np.take_along_axis(obj, alloc[None], 0).sum()
    assert chosen == pytest.approx(best_val, rel=1e-12)
    assert all(chosen <= obj[k].sum() + 1e-12 for k in range(3))


def test_select_allocation_on_model(model):
    x = rand_image(6)
    sel = cacd.select_allocation(x, model)
    assert sel.allocation.shape == (4, 4) and sel.mask.shape == (8, 4, 4)
    objective = np.stack([d.rate_map / cacd.BLOCK_PIXELS + model.levels.target * d.dist_map for d in sel.levels])
    np.testing.assert_allclose(sel.objective, objective, rtol=1e-12)
    chosen = np.take_along_axis(sel.objective, sel.allocation[None], 0)[0]
    assert np.all(chosen <= sel.objective.min(axis=0) + 1e-12)
    np.testing.assert_array_equal(sel.mask, cacd.allocation_mask(sel.allocation, model.levels.widths, 8))


def test_select_single_level(model):
    sel = cacd.select_allocation(rand_image(7), model, model.levels.truncated(1))
    assert not sel.allocation.any() and sel.mask.all()


def test_select_rejects_unpadded(model):
    with pytest.raises(ShapeError):
        cacd.select_allocation(rand_image(0, 48, 64), model)


# -- bit conversion ratio --------------------------------------------------------

def test_eta_hand_example():
    x = np.full((1, 3, 16, 32), 0.5)
    x_low = x.copy()
    x_low[..., :16] += 0.1  # block 0 PSNR 20 dB
    x_low[..., 16:] += 0.1
    x_high = x.copy()
    x_high[..., :16] += 0.1 * 10 ** (-2 / 20)  # +2 dB
    x_high[..., 16:] += 0.1 * 10 ** (1 / 20)  # -1 dB
    low_bits = np.array([[100.0, 100.0]])
    high_bits = low_bits + 0.5 * 256
    eta = cacd.bit_conversion_ratio(x, x_low, low_bits, x_high, high_bits)
    np.testing.assert_allclose(eta, [[4.0, -2.0]], rtol=1e-9)


def test_eta_sentinel_for_equal_rates():
    x = np.random.default_rng(0).uniform(size=(1, 3, 32, 32))
    eta = cacd.bit_conversion_ratio(x, x, np.ones((2, 2)), x, np.ones((2, 2)))
    assert np.isnan(eta).all()


def test_eta_shape_checks():
    x = np.zeros((1, 3, 32, 32))
    with pytest.raises(ShapeError):
        cacd.bit_conversion_ratio(x, x, np.ones((2, 2)), np.zeros((1, 3, 32, 16)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        cacd.bit_conversion_ratio(x, x, np.ones((2, 1)), x, np.ones((2, 2)))


def test_block_psnr_cap():
    x = np.zeros((1, 3, 16, 16))
    assert cacd.block_psnr(x, x)[0, 0] == cacd.PSNR_CAP
    assert cacd.block_psnr(x, x + 0.1)[0, 0] == pytest.approx(20.0)


def test_block_bits_spreads_hyper_bits(model):
    y, z = inf.analyze(model, rand_image(8))
    diag = cacd.uniform_level(model, rand_image(8), y, z, 8)
    per_block = cacd.block_bits(diag)
    assert per_block.sum() == pytest.approx(diag.rate_map.sum() + diag.z_bits, rel=1e-9)
    assert cacd.block_bits(diag, 32).shape == (2, 2)
    assert math.isclose(cacd.block_bits(diag, 32).sum(), per_block.sum(), rel_tol=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cald import tensor as T
from cald.entropy import models as em
from cald.entropy.rangecoder import TOTAL
from cald.gradcheck import check_gradients
from cald.tensor import Tensor


def phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def phi_series(x: float) -> float:
    """Standard normal CDF from the Maclaurin series of erf; accurate for moderate |x| only."""
    z = x / math.sqrt(2.0)
    term, total, n = z, z, 0
    while abs(term) > 1e-18 * max(1.0, abs(total)):
        n += 1
        term *= -z * z / n
        total += term / (2 * n + 1)
    return 0.5 * (1.0 + 2.0 / math.sqrt(math.pi) * total)


def bits_oracle(v, mu, sigma):
    d = abs(v - mu)
    return -math.log2(phi((0.5 - d) / sigma) - phi((-0.5 - d) / sigma))


def f64(a):
    return Tensor(np.asarray(a, np.float64))


# -- quantization ---------------------------------------------------------------

def test_noise_support_and_determinism():
    y = Tensor(np.zeros((4, 8, 8, 8), np.float32))
    a = em.quantize_noise(y, np.random.default_rng(5)).data
    b = em.quantize_noise(y, np.random.default_rng(5)).data
    assert np.array_equal(a, b)
    assert a.min() >= -0.5 and a.max() < 0.5


def test_noise_mean_monte_carlo():
    d = em.quantize_noise(Tensor(np.zeros(10**6)), np.random.default_rng(0)).data
    assert abs(d.mean()) <= 3 * (1 / math.sqrt(12)) / 1e3


def test_noise_gradient_is_identity():
    y = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
    T.backward(T.sum_all(em.quantize_noise(y, np.random.default_rng(2))))
    np.testing.assert_array_equal(y.grad, np.ones((2, 3)))


def test_round_examples():
    y_hat, sym = em.quantize_round(np.array([3.2]), np.array([3.0]))
    assert sym[0] == 0 and y_hat[0] == pytest.approx(3.0)
    _, sym = em.quantize_round(np.array([-1.5, 1.5, 2.5, -0.5]), 0.0)
    np.testing.assert_array_equal(sym, [-2, 2, 3, -1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_round_residual_integral(seed):
    rng = np.random.default_rng(seed)
    y, mu = rng.normal(0, 20, 50), rng.normal(0, 5, 50)
    y_hat, sym = em.quantize_round(y, mu)
    np.testing.assert_allclose(y_hat - mu, sym, atol=1e-9)
    assert np.all(np.abs(y - y_hat) <= 0.5 + 1e-9)


def test_round_rejects_non_finite():
    with pytest.raises(ValueError):
        em.quantize_round(np.array([1.0, np.nan]), 0.0)


# -- gaussian bits ----------------------------------------------------------------

def test_gaussian_unit_sigma_example():
    bits = em.gaussian_bits(f64([0.0]), f64([0.0]), f64([1.0])).data[0]
    assert bits == pytest.approx(-math.log2(0.38292492254802624), abs=1e-9)
    assert bits == pytest.approx(-math.log2(phi_series(0.5) - phi_series(-0.5)), abs=1e-9)
    assert bits == pytest.approx(1.3849, abs=1e-4)


def test_gaussian_narrow_sigma_is_free_without_floor():
    bits = em.gaussian_bits(f64([0.0]), f64([0.0]), f64([0.05]), sigma_floor=None).data[0]
    assert 0 <= bits < 1e-6


def test_gaussian_sigma_floor_applies():
    floored = em.gaussian_bits(f64([0.3]), f64([0.0]), f64([0.01])).data[0]
    assert floored == pytest.approx(bits_oracle(0.3, 0.0, em.SIGMA_FLOOR), rel=1e-6)
    assert bits_oracle(0.3, 0.0, 0.01) < 1e-9 < floored


@pytest.mark.parametrize("v,mu,sigma", [(2.0, 0.3, 0.7), (-3.0, 1.0, 2.5), (0.0, -0.2, 0.4), (6.0, 0.0, 3.0)])
def test_gaussian_matches_series_oracle(v, mu, sigma):
    bits = em.gaussian_bits(f64([v]), f64([mu]), f64([sigma]), likelihood_bound=0.0).data[0]
    assert bits == pytest.approx(bits_oracle(v, mu, sigma), rel=1e-7)
    assert em.gaussian_bits_exact(v, mu, sigma) == pytest.approx(bits_oracle(v, mu, sigma), rel=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 30), st.floats(0.11, 20))
def test_gaussian_symmetry(v, sigma):
    b = em.gaussian_bits(f64([v, -v]), f64([0.0, 0.0]), f64([sigma, sigma])).data
    assert b[0] == b[1]


def test_exact_bits_finite_far_in_tail():
    assert np.isfinite(em.gaussian_bits_exact(1e4, 0.0, 0.11))
    assert np.isfinite(em.logistic_bits_exact(1e5, 0.0, 1e-3))


def test_gaussian_bits_gradients():
    rng = np.random.default_rng(3)
    v = Tensor(rng.normal(size=40), requires_grad=True)
    mu = Tensor(rng.normal(size=40), requires_grad=True)
    sigma = Tensor(rng.uniform(0.3, 3.0, 40), requires_grad=True)
    err = check_gradients(lambda: T.sum_all(em.gaussian_bits(v, mu, sigma, likelihood_bound=0.0)), [v, mu, sigma])
    assert err < 1e-3


# -- factorized prior ----------------------------------------------------------------

@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")  # far-tail mass underflows to 0
def test_factorized_normalization():
    v = np.arange(-10**4, 10**4 + 1, dtype=np.float64)
    for loc, scale in [(0.3, 0.8), (-2.0, 5.0), (0.0, 1e-3)]:
        bits = em.factorized_bits(f64(v), f64(loc), f64(scale), likelihood_bound=0.0).data
        assert abs(np.sum(2.0 ** -bits) - 1.0) < 1e-6


def test_factorized_symmetry_and_floor():
    prior = em.FactorizedPrior(2)
    prior.loc.data = np.array([3.0, -1.0], np.float32)
    k = np.array([1.0, 2.0, 5.0])
    v_plus = np.stack([3 + k, -1 + k])[None, :, :, None]
    v_minus = np.stack([3 - k, -1 - k])[None, :, :, None]
    np.testing.assert_array_equal(prior.bits(Tensor(v_plus.astype(np.float32))).data, prior.bits(Tensor(v_minus.astype(np.float32))).data)
    prior.raw_scale.data = np.full(2, -80.0, np.float32)
    assert np.all(prior.scale().data >= em.SCALE_FLOOR)
    assert np.all(np.isfinite(prior.bits(Tensor(np.full((1, 2, 1, 1), 50.0, np.float32))).data))


def test_factorized_gradients():
    rng = np.random.default_rng(4)
    v = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    loc = Tensor(rng.normal(size=3), requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 2.0, 3), requires_grad=True)
    assert check_gradients(lambda: T.sum_all(em.factorized_bits(v, loc, scale)), [v, loc, scale]) < 1e-3


# -- quantized tables ------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.floats(0.11, 40), st.integers(-40, 0), st.integers(0, 40))
def test_cdf_tables_are_valid(sigma, lo, hi):
    for table in (em.gaussian_cdfs([sigma], lo, hi)[0], em.logistic_cdfs([sigma], lo, hi)[0]):
        cdf = np.array(table.cdf)
        assert cdf[0] == 0 and cdf[-1] == TOTAL
        assert np.all(np.diff(cdf) >= 1)
        assert table.num_regular == hi - lo + 1


def test_quantized_gaussian_kl_is_small():
    table = em.gaussian_cdfs([1.0], -12, 12)[0]
    q = np.diff(table.cdf)[:-1] / TOTAL
    s = np.arange(-12, 13)
    p = np.array([phi(0.5 - abs(v)) - phi(-0.5 - abs(v)) for v in s])
    kl = float(np.sum(p * np.log2(p / q)))
    assert 0 <= kl < 1e-3


def test_every_coded_symbol_has_min_probability():
    tables = em.gaussian_cdfs(np.array([0.11, 1.0, 30.0]), -64, 64)
    for t in tables:
        assert min(np.diff(t.cdf)) >= 1  # i.e. probability >= 2**-16

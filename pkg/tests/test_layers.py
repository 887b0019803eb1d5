import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cald import layers as L
from cald import tensor as T
from cald.gradcheck import check_gradients
from cald.tensor import ShapeError, Tensor


def gdn_oracle(x, beta, gamma, inverse=False):
    norm = np.sqrt(beta.reshape(1, -1, 1, 1) + np.einsum("ij,njhw->nihw", gamma, x * x))
    return x * norm if inverse else x / norm


def params_for(beta, gamma):
    """Raw (b, g) giving the requested effective beta/gamma."""
    b = np.sqrt(np.maximum(np.asarray(beta, np.float64) - L.BETA_MIN, 0.0))
    g = np.sqrt(np.asarray(gamma, np.float64))
    return Tensor(b, requires_grad=True), Tensor(g, requires_grad=True)


def test_gdn_identity_configuration():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    b, g = params_for(np.ones(3), np.zeros((3, 3)))
    np.testing.assert_allclose(L.gdn(Tensor(x), b, g).data, x, rtol=1e-6)
    np.testing.assert_allclose(L.igdn(Tensor(x), b, g).data, x, rtol=1e-6)


def test_gdn_single_channel_formula():
    b, g = params_for([L.BETA_MIN], [[1.0]])
    out = L.gdn(Tensor(np.full((1, 1, 1, 1), 2.0)), b, g).data.item()
    assert out == pytest.approx(2.0 / math.sqrt(4.0 + L.BETA_MIN), rel=1e-12)


def test_gdn_default_init_on_one():
    layer = L.GDN(1)
    out = layer(Tensor(np.ones((1, 1, 1, 1), np.float32))).data.item()
    assert out == pytest.approx(1 / math.sqrt(1.1), rel=1e-6)


@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_matches_oracle(inverse):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 3, 3))
    beta = rng.uniform(0.5, 2, 4)
    gamma = rng.uniform(0, 0.5, (4, 4))
    b, g = params_for(beta, gamma)
    fn = L.igdn if inverse else L.gdn
    np.testing.assert_allclose(fn(Tensor(x), b, g).data, gdn_oracle(x, beta, gamma, inverse), rtol=1e-9)


@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_gradients(inverse):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    b, g = params_for(rng.uniform(0.5, 2, 3), rng.uniform(0.01, 0.5, (3, 3)))
    probe = Tensor(rng.normal(size=(2, 3, 3, 3)))
    fn = L.igdn if inverse else L.gdn
    assert check_gradients(lambda: T.sum_all(T.mul(fn(x, b, g), probe)), [x, b, g]) < 1e-3


def test_gdn_channel_mismatch():
    with pytest.raises(ShapeError):
        L.GDN(3)(Tensor(np.zeros((1, 4, 2, 2), np.float32)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-5, 5))
def test_reparameterization_keeps_constraints(seed, step):
    """Any raw parameter values map to beta >= beta_min and gamma >= 0."""
    rng = np.random.default_rng(seed)
    layer = L.GDN(3)
    layer.beta.data = (layer.beta.data + step * rng.normal(size=3)).astype(np.float32)
    layer.gamma.data = (layer.gamma.data + step * rng.normal(size=(3, 3))).astype(np.float32)
    beta, gamma = layer.effective()
    assert np.all(beta >= np.float32(L.BETA_MIN)) and np.all(gamma >= 0)
    x = rng.normal(size=(1, 3, 2, 2)).astype(np.float32)
    y = layer(Tensor(x)).data
    assert np.all(np.sign(y) == np.sign(x))
    assert np.all(np.abs(y) <= np.abs(x) / math.sqrt(L.BETA_MIN) * (1 + 1e-6))


def test_leaky_relu_module():
    out = L.LeakyReLU()(Tensor(np.array([5.0, -2.0, 0.0]))).data
    np.testing.assert_allclose(out, [5.0, -0.02, 0.0])


def test_init_is_deterministic_and_bounded():
    spec = L.LayerSpec("conv", 1, 8, kernel=3)
    a, b = L.init_parameters(spec, seed=5), L.init_parameters(spec, seed=5)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.all(np.abs(a["weight"]) <= math.sqrt(6 / 9))
    assert not a["bias"].any()
    d = L.init_parameters(L.LayerSpec("deconv", 4, 2, kernel=5), seed=0)
    assert d["weight"].shape == (4, 2, 5, 5)


def test_gdn_init_values():
    p = L.init_parameters(L.LayerSpec("gdn", 4), seed=0)
    beta = p["beta"].astype(np.float64) ** 2 + L.BETA_MIN
    gamma = p["gamma"].astype(np.float64) ** 2
    np.testing.assert_allclose(beta, 1.0, rtol=1e-6)
    np.testing.assert_allclose(np.diag(gamma), 0.1, rtol=1e-6)
    off = gamma[~np.eye(4, dtype=bool)]
    assert np.all(off <= 1e-5) and np.all(off > 0)


def test_unknown_layer_kind_rejected():
    with pytest.raises(ValueError):
        L.LayerSpec("attention")


def test_module_registration():
    seq = L.Sequential(L.Conv2d(3, 4, 3, 1), L.GDN(4), L.ConvTranspose2d(4, 2, 3, 2))
    names = [n for n, _ in seq.named_parameters()]
    assert names == ["0.weight", "0.bias", "1.beta", "1.gamma", "2.weight", "2.bias"]
    out = seq(Tensor(np.zeros((1, 3, 4, 4), np.float32)))
    assert out.shape == (1, 2, 8, 8)

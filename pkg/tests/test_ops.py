import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cald import ops
from cald import tensor as T
from cald.gradcheck import check_gradients
from cald.tensor import ShapeError, Tensor


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out + (0 if b is None else b.reshape(1, -1, 1, 1))


def naive_conv_transpose(x, w, b, stride, pad, out_pad):
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full_h, full_w = (h - 1) * stride + k + out_pad, (wd - 1) * stride + k + out_pad
    buf = np.zeros((n, cout, full_h, full_w))
    for i in range(h):
        for j in range(wd):
            buf[:, :, i * stride : i * stride + k, j * stride : j * stride + k] += np.einsum("nc,cokl->nokl", x[:, :, i, j], w)
    oh, ow = (h - 1) * stride - 2 * pad + k + out_pad, (wd - 1) * stride - 2 * pad + k + out_pad
    out = buf[:, :, pad : pad + oh, pad : pad + ow]
    return out + (0 if b is None else b.reshape(1, -1, 1, 1))


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def leaf(a):
    return Tensor(np.array(a, np.float64), requires_grad=True)


# -- conv2d ----------------------------------------------------------------

def test_identity_kernel():
    x = rnd(2, 3, 5, 5).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, x)


def test_all_ones_sum():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


@pytest.mark.parametrize("k,stride,pad,h", [(5, 2, 2, 8), (3, 1, 1, 6), (3, 2, 0, 7), (1, 1, 0, 4), (5, 2, 2, 9)])
def test_conv_matches_oracle(k, stride, pad, h):
    x, w, b = rnd(2, 3, h, h + 1, seed=1), rnd(4, 3, k, k, seed=2), rnd(4, seed=3)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    ref = naive_conv(x, w, b, stride, pad)
    assert out.shape == ref.shape == (2, 4, (h + 2 * pad - k) // stride + 1, (h + 1 + 2 * pad - k) // stride + 1)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


def test_conv_kernel_larger_than_input_rejected():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("k,stride,pad", [(5, 2, 2), (3, 1, 1), (3, 2, 1)])
def test_conv_gradients(k, stride, pad):
    x, w, b = leaf(rnd(2, 2, 6, 6, seed=4)), leaf(rnd(3, 2, k, k, seed=5)), leaf(rnd(3, seed=6))
    probe = Tensor(rnd(*naive_conv(x.data, w.data, None, stride, pad).shape, seed=7))
    err = check_gradients(lambda: T.sum_all(T.mul(ops.conv2d(x, w, b, stride, pad), probe)), [x, w, b])
    assert err < 1e-3


# -- transposed conv --------------------------------------------------------

@pytest.mark.parametrize("k,stride,pad,out_pad", [(5, 2, 2, 1), (3, 1, 1, 0), (3, 2, 1, 1), (2, 2, 0, 0), (4, 3, 1, 2)])
def test_conv_transpose_matches_oracle(k, stride, pad, out_pad):
    x, w, b = rnd(2, 3, 3, 4, seed=8), rnd(3, 2, k, k, seed=9), rnd(2, seed=10)
    out = ops.conv2d_transpose(Tensor(x), Tensor(w), Tensor(b), stride, pad, out_pad).data
    np.testing.assert_allclose(out, naive_conv_transpose(x, w, b, stride, pad, out_pad), rtol=1e-10, atol=1e-10)


def test_single_tap_reproduces_kernel():
    w = rnd(1, 1, 2, 2, seed=11)
    out = ops.conv2d_transpose(Tensor(np.ones((1, 1, 1, 1))), Tensor(w), stride=2)
    np.testing.assert_allclose(out.data, w)


@settings(max_examples=25, deadline=None)
@given(
    k=st.sampled_from([1, 2, 3, 5]),
    stride=st.integers(1, 3),
    pad=st.integers(0, 2),
    h=st.integers(4, 9),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    seed=st.integers(0, 10**6),
)
def test_adjoint_identity(k, stride, pad, h, cin, cout, seed):
    """<conv(x), y> == <x, conv_T(y)> with the output padding chosen to recover x's extent."""
    if h + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, cin, h, h))
    w = rng.normal(size=(cout, cin, k, k))
    y_shape = naive_conv(x, w, None, stride, pad).shape
    out_pad = h - ((y_shape[2] - 1) * stride - 2 * pad + k)
    if not 0 <= out_pad < stride:
        return
    y = rng.normal(size=y_shape)
    lhs = np.sum(ops.conv2d(Tensor(x), Tensor(w), None, stride, pad).data * y)
    rhs = np.sum(x * ops.conv2d_transpose(Tensor(y), Tensor(w), None, stride, pad, out_pad).data)
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_bad_transpose_geometry_rejected():
    with pytest.raises(ShapeError):
        ops.conv2d_transpose(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1, out_pad=2)
    with pytest.raises(ShapeError):
        ops.conv2d_transpose(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


@pytest.mark.parametrize("k,stride,pad,out_pad", [(5, 2, 2, 1), (3, 1, 1, 0), (3, 2, 1, 1)])
def test_conv_transpose_gradients(k, stride, pad, out_pad):
    x, w, b = leaf(rnd(2, 2, 3, 3, seed=12)), leaf(rnd(2, 3, k, k, seed=13)), leaf(rnd(3, seed=14))
    shape = naive_conv_transpose(x.data, w.data, None, stride, pad, out_pad).shape
    probe = Tensor(rnd(*shape, seed=15))
    err = check_gradients(lambda: T.sum_all(T.mul(ops.conv2d_transpose(x, w, b, stride, pad, out_pad), probe)), [x, w, b])
    assert err < 1e-3


# -- pooling, concat, pad, crop ------------------------------------------------

def test_maxpool_example():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ops.maxpool2d(Tensor(x), 2).data[0, 0], [[6, 8], [14, 16]])


def test_maxpool_binary_and_zero():
    m = np.zeros((1, 2, 8, 8))
    assert not ops.maxpool2d(Tensor(m), 4).data.any()
    m[0, 1, 5, 2] = 1
    pooled = ops.maxpool2d(Tensor(m), 4).data
    assert pooled[0, 1, 1, 0] == 1 and pooled.sum() == 1


def test_maxpool_indivisible_rejected():
    with pytest.raises(ShapeError):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 6, 6))), 4)


def test_maxpool_gradient():
    x = leaf(rnd(1, 2, 4, 4, seed=16))
    assert check_gradients(lambda: T.sum_all(T.square(ops.maxpool2d(x, 2))), [x]) < 1e-3


def test_concat_shapes_and_gradient():
    a, b = leaf(rnd(2, 3, 4, 4, seed=17)), leaf(rnd(2, 5, 4, 4, seed=18))
    assert ops.concat_channels(a, b).shape == (2, 8, 4, 4)
    probe = Tensor(rnd(2, 8, 4, 4, seed=19))
    assert check_gradients(lambda: T.sum_all(T.mul(ops.concat_channels(a, b), probe)), [a, b]) < 1e-6
    with pytest.raises(ShapeError):
        ops.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


def test_pad_single_pixel():
    out = ops.pad_replicate(Tensor(np.full((1, 1, 1, 1), 3.0)), 1, 1, 1, 1)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 3.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 10**6))
def test_crop_inverts_pad(t, b, l, r, seed):
    x = np.random.default_rng(seed).normal(size=(1, 2, 3, 5)).astype(np.float32)
    padded = ops.pad_replicate(Tensor(x), t, b, l, r)
    assert padded.shape == (1, 2, 3 + t + b, 5 + l + r)
    np.testing.assert_array_equal(ops.crop(padded, t, l, 3, 5).data, x)


def test_pad_and_crop_gradients():
    x = leaf(rnd(1, 2, 3, 3, seed=20))
    probe = Tensor(rnd(1, 2, 6, 5, seed=21))
    assert check_gradients(lambda: T.sum_all(T.mul(ops.pad_replicate(x, 1, 2, 0, 2), probe)), [x]) < 1e-6
    y = leaf(rnd(1, 2, 5, 5, seed=22))
    assert check_gradients(lambda: T.sum_all(T.square(ops.crop(y, 1, 2, 3, 2))), [y]) < 1e-6

"""Spatial ops on NCHW tensors: convolutions, pooling, concat, pad/crop."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _make


def _im2col(xi: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Column matrix [C*k*k, out_h*out_w] of one sample xi[C, H, W]."""
    c = xi.shape[0]
    s0, s1, s2 = xi.strides
    view = as_strided(
        xi, shape=(c, k, k, out_h, out_w), strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )
    return view.reshape(c * k * k, out_h * out_w)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of a padded input with w[Cout, Cin, k, k]."""
    n = xp.shape[0]
    cout, k = w.shape[0], w.shape[2]
    out_h = (xp.shape[2] - k) // stride + 1
    out_w = (xp.shape[3] - k) // stride + 1
    wm = w.reshape(cout, -1)
    out = np.empty((n, cout, out_h, out_w), dtype=xp.dtype)
    for i in range(n):
        out[i] = (wm @ _im2col(xp[i], k, stride, out_h, out_w)).reshape(cout, out_h, out_w)
    return out


def _weight_grad(xp: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    """d/dw of the valid correlation; g is (N, Cout, oh, ow), result (Cout, Cin, k, k)."""
    n, cout, oh, ow = g.shape
    cin = xp.shape[1]
    gw = np.zeros((cout, cin * k * k), dtype=g.dtype)
    for i in range(n):
        gw += g[i].reshape(cout, oh * ow) @ _im2col(xp[i], k, stride, oh, ow).T
    return gw.reshape(cout, cin, k, k)


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, out_shape) -> np.ndarray:
    """Adjoint of the valid correlation with respect to its input.

    g: (N, Cout, oh, ow); returns an array of ``out_shape`` (N, Cin, H, W).
    """
    n, cout, oh, ow = g.shape
    cin, k = w.shape[1], w.shape[2]
    wt = w.reshape(cout, -1).T  # (Cin*k*k, Cout)
    out = np.zeros(out_shape, dtype=g.dtype)
    for b in range(n):
        cols = (wt @ g[b].reshape(cout, oh * ow)).reshape(cin, k, k, oh, ow)
        ob = out[b]
        for i in range(k):
            for j in range(k):
                ob[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    return out


def _input_grad(g: np.ndarray, w: np.ndarray, stride: int, xp_shape) -> np.ndarray:
    if stride == 1:
        # full correlation with the spatially flipped, channel-transposed kernel
        k = w.shape[2]
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _correlate(gp, wf, 1)
    return _scatter(g, w, stride, xp_shape)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding; w is [Cout, Cin, k, k]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if stride < 1 or h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d geometry invalid: input {x.shape}, k={k}, stride={stride}, pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = _correlate(xp, w.data, stride)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gw = _weight_grad(xp, g, k, stride)
        gxp = _input_grad(g, w.data, stride, xp.shape)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def conv2d_transpose(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, out_pad: int = 0
) -> Tensor:
    """Transposed convolution, the exact adjoint of ``conv2d`` with the same weight.

    w is [Cin, Cout, k, k] where Cin is the channel count of ``x``.  Output
    extent is (H - 1) * stride - 2 * pad + k + out_pad.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    wcin, cout, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape}, weight {w.shape}")
    if stride < 1 or out_pad < 0 or out_pad >= stride:
        raise ShapeError(f"conv2d_transpose requires 0 <= out_pad < stride, got {out_pad}, {stride}")
    full_h = (h - 1) * stride + k
    full_w = (wd - 1) * stride + k
    out_h = full_h - 2 * pad + out_pad
    out_w = full_w - 2 * pad + out_pad
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_transpose geometry yields empty output for input {x.shape}")
    buf_shape = (n, cout, full_h + out_pad, full_w + out_pad)
    buf = _scatter(x.data, w.data, stride, buf_shape)
    out = np.ascontiguousarray(buf[:, :, pad : pad + out_h, pad : pad + out_w])
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gbuf = np.zeros(buf_shape, dtype=g.dtype)
        gbuf[:, :, pad : pad + out_h, pad : pad + out_w] = g
        gbuf = gbuf[:, :, :full_h, :full_w]
        gx = _correlate(gbuf, w.data, stride)
        # cols of gbuf contracted with x gives the [Cin, Cout, k, k] layout directly
        gw = _weight_grad(gbuf, x.data, k, stride)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling (k == stride)."""
    stride = k if stride is None else stride
    if stride != k:
        raise ShapeError("maxpool2d supports only k == stride")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), backward)


def pad_replicate(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Pad by replicating border pixels."""
    if min(top, bottom, left, right) < 0:
        raise ShapeError("padding amounts must be non-negative")
    n, c, h, w = x.shape
    rows = np.clip(np.arange(-top, h + bottom), 0, h - 1)
    cols = np.clip(np.arange(-left, w + right), 0, w - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        gr = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    n, c, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
        raise ShapeError(f"crop region ({top},{left},{height},{width}) outside {x.shape}")
    out = x.data[:, :, top : top + height, left : left + width]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, top : top + height, left : left + width] = g
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)

"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(
    fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3, indices: Sequence[tuple] | None = None
) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to entries of ``x``.

    ``x.data`` is perturbed in place and restored.  With ``indices`` only those
    entries are probed; the result then has one value per index.
    """
    flat_targets = list(indices) if indices is not None else list(np.ndindex(*x.shape))
    out = np.zeros(len(flat_targets), dtype=np.float64)
    for n, idx in enumerate(flat_targets):
        orig = x.data[idx]
        x.data[idx] = orig + h
        f_plus = float(fn().data)
        x.data[idx] = orig - h
        f_minus = float(fn().data)
        x.data[idx] = orig
        out[n] = (f_plus - f_minus) / (2.0 * h)
    if indices is None:
        return out.reshape(x.shape)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalised by the largest numeric gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    max_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error over ``inputs`` between backprop and finite differences."""
    loss = fn()
    backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        if max_probes is not None and t.data.size > max_probes:
            flat = rng.choice(t.data.size, size=max_probes, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat]
            num = numeric_grad(fn, t, h, idx)
            ana = np.array([g[i] for i in idx])
        else:
            num = numeric_grad(fn, t, h)
            ana = g
        worst = max(worst, relative_error(ana, num))
    return worst

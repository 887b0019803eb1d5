"""Neural layers used by the codec: conv blocks, (I)GDN, LeakyReLU."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from . import tensor as T
from .tensor import ShapeError, Tensor

BETA_MIN = 1e-6
GAMMA_INIT = 0.1
# off-diagonal seed for the squared gamma reparameterisation; an exact zero
# would be a stationary point that gradient descent can never leave
GAMMA_OFFDIAG_SEED = 2.0**-10
LRELU_SLOPE = 0.01


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | deconv | gdn | igdn | lrelu
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "deconv", "gdn", "igdn", "lrelu"):
            raise ValueError(f"unknown layer kind {self.kind!r}")


def init_parameters(spec: LayerSpec, seed, dtype=np.float32) -> dict[str, np.ndarray]:
    """Initial parameter arrays for ``spec``.

    Conv weights are He-uniform on the fan-in (bound sqrt(6 / fan_in)), biases
    zero.  GDN parameters start at beta = 1, gamma ~= 0.1 * I.
    """
    rng = np.random.default_rng(seed)
    if spec.kind in ("conv", "deconv"):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        bound = math.sqrt(6.0 / fan_in)
        if spec.kind == "conv":
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        else:
            shape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        weight = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return {"weight": weight, "bias": np.zeros(spec.out_channels, dtype=dtype)}
    if spec.kind in ("gdn", "igdn"):
        c = spec.in_channels
        b = np.full(c, math.sqrt(1.0 - BETA_MIN), dtype=dtype)
        g = np.full((c, c), GAMMA_OFFDIAG_SEED, dtype=dtype)
        np.fill_diagonal(g, math.sqrt(GAMMA_INIT))
        return {"beta": b, "gamma": g}
    return {}


class Module:
    """Minimal parameter container with deterministic traversal order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, name, value):
        if isinstance(value, Module) and name != "_children":
            self.__dict__.setdefault("_children", {})[name] = value
        super().__setattr__(name, value)

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._children[str(i)] = layer

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Conv2d(Module):
    """Conv with 'same'-style padding k // 2."""

    def __init__(self, cin: int, cout: int, kernel: int = 5, stride: int = 2, seed=0):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2
        p = init_parameters(LayerSpec("conv", cin, cout, kernel, stride), seed)
        self.weight = self.add_param("weight", p["weight"])
        self.bias = self.add_param("bias", p["bias"])

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    """Transposed conv that upsamples exactly by ``stride``."""

    def __init__(self, cin: int, cout: int, kernel: int = 5, stride: int = 2, seed=0):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2
        self.out_pad = stride - 1
        p = init_parameters(LayerSpec("deconv", cin, cout, kernel, stride), seed)
        self.weight = self.add_param("weight", p["weight"])
        self.bias = self.add_param("bias", p["bias"])

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d_transpose(x, self.weight, self.bias, self.stride, self.pad, self.out_pad)


class LeakyReLU(Module):
    def __init__(self, slope: float = LRELU_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(x, self.slope)


def _gdn_norm(x: Tensor, b: Tensor, g: Tensor) -> Tensor:
    if x.shape[1] != b.shape[0]:
        raise ShapeError(f"GDN expects {b.shape[0]} channels, got input {x.shape}")
    beta = T.square(b) + BETA_MIN
    gamma = T.square(g)
    # sum_j gamma_ij x_j^2 as a 1x1 convolution
    c = g.shape[0]
    gamma_w = _reshape_1x1(gamma, c)
    return T.sqrt(ops.conv2d(T.square(x), gamma_w, beta))


def _reshape_1x1(m: Tensor, c: int) -> Tensor:
    def backward(grad):
        return (grad.reshape(c, c),)

    return T._make(m.data.reshape(c, c, 1, 1), (m,), backward)


def gdn(x: Tensor, b: Tensor, g: Tensor) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), beta = b^2 + BETA_MIN, gamma = g^2."""
    return T.div(x, _gdn_norm(x, b, g))


def igdn(x: Tensor, b: Tensor, g: Tensor) -> Tensor:
    """y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)."""
    return T.mul(x, _gdn_norm(x, b, g))


class GDN(Module):
    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        p = init_parameters(LayerSpec("igdn" if inverse else "gdn", channels), seed=0)
        self.beta = self.add_param("beta", p["beta"])
        self.gamma = self.add_param("gamma", p["gamma"])

    def effective(self) -> tuple[np.ndarray, np.ndarray]:
        """(beta, gamma) as used in the forward pass."""
        return self.beta.data**2 + BETA_MIN, self.gamma.data**2

    def forward(self, x: Tensor) -> Tensor:
        fn = igdn if self.inverse else gdn
        return fn(x, self.beta, self.gamma)

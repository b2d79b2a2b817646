"""Layers with explicit forward/backward passes on NHWC float64 arrays.

Parameters live in a shared ``dict[str, Tensor]`` owned by the model; a layer
only remembers the names of its tensors, so the same layer graph can run on
float32 storage (training, inference) or float64 storage (gradient checks).
"""

from __future__ import annotations

import math

import numpy as np

from terracost import kernels
from terracost.rng import SplitMix64


class Tensor:
    """A value array plus an optional gradient of the same shape."""

    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value, trainable: bool = True):
        self.value = np.asarray(value)
        self.grad = None
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.value.shape}")
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.value.dtype})"


Params = dict


def _f64(t: Tensor) -> np.ndarray:
    return t.value.astype(np.float64, copy=False)


class Layer:
    def init(self, params: Params, rng: SplitMix64) -> None:
        pass

    def forward(self, params: Params, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, params: Params, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0):
        self.name, self.cin, self.cout, self.k, self.stride, self.pad = name, cin, cout, k, stride, pad
        self._cache = None

    def init(self, params, rng):
        fan_in = self.k * self.k * self.cin
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, fan_in * self.cout).reshape(self.k, self.k, self.cin, self.cout)
        params[self.name + ".weight"] = Tensor(w)

    def forward(self, params, x, train):
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = kernels.im2col(np.ascontiguousarray(xp), self.k, self.stride)
        n, ho, wo = cols.shape[:3]
        w2 = _f64(params[self.name + ".weight"]).reshape(-1, self.cout)
        out = cols.reshape(n * ho * wo, -1) @ w2
        if train:
            self._cache = (cols, xp.shape)
        return out.reshape(n, ho, wo, self.cout)

    def backward(self, params, g):
        cols, xp_shape = self._cache
        self._cache = None
        wt = params[self.name + ".weight"]
        g2 = g.reshape(-1, self.cout)
        c2 = cols.reshape(g2.shape[0], -1)
        wt.accumulate((c2.T @ g2).reshape(wt.shape))
        dcols = (g2 @ _f64(wt).reshape(-1, self.cout).T).reshape(cols.shape)
        dxp = kernels.col2im(dcols, xp_shape[1], xp_shape[2], self.stride)
        p = self.pad
        return dxp[:, p : xp_shape[1] - p, p : xp_shape[2] - p, :] if p else dxp


class BatchNorm(Layer):
    """Per-channel normalisation; batch statistics in training, running ones in inference."""

    def __init__(self, name: str, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.name, self.channels, self.momentum, self.eps = name, channels, momentum, eps
        self._cache = None

    def init(self, params, rng):
        c = self.channels
        params[self.name + ".gamma"] = Tensor(np.ones(c))
        params[self.name + ".beta"] = Tensor(np.zeros(c))
        params[self.name + ".running_mean"] = Tensor(np.zeros(c), trainable=False)
        params[self.name + ".running_var"] = Tensor(np.ones(c), trainable=False)

    def forward(self, params, x, train):
        gamma = _f64(params[self.name + ".gamma"])
        beta = _f64(params[self.name + ".beta"])
        rm = params[self.name + ".running_mean"]
        rv = params[self.name + ".running_var"]
        if train:
            m = x.shape[0] * x.shape[1] * x.shape[2]
            mean = x.mean(axis=(0, 1, 2))
            xc = x - mean
            var = (xc * xc).mean(axis=(0, 1, 2))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv
            unbiased = var * m / max(m - 1, 1)
            rm.value = (self.momentum * _f64(rm) + (1 - self.momentum) * mean).astype(rm.value.dtype)
            rv.value = (self.momentum * _f64(rv) + (1 - self.momentum) * unbiased).astype(rv.value.dtype)
            self._cache = (xhat, inv)
        else:
            xhat = (x - _f64(rm)) / np.sqrt(_f64(rv) + self.eps)
        return xhat * gamma + beta

    def backward(self, params, g):
        xhat, inv = self._cache
        self._cache = None
        gt = params[self.name + ".gamma"]
        bt = params[self.name + ".beta"]
        gt.accumulate((g * xhat).sum(axis=(0, 1, 2)))
        bt.accumulate(g.sum(axis=(0, 1, 2)))
        m = g.shape[0] * g.shape[1] * g.shape[2]
        dxhat = g * _f64(gt)
        return inv / m * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))


class ReLU(Layer):
    def __init__(self):
        self._mask = None
        # set by gradient checks to pin the activation pattern of a reference pass
        self.frozen = None
        self.recording = False
        self.recorded = None

    def forward(self, params, x, train):
        mask = self.frozen if self.frozen is not None else x > 0
        if self.recording:
            self.recorded = mask
        if train:
            self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, params, g):
        mask, self._mask = self._mask, None
        return np.where(mask, g, 0.0)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def init(self, params, rng):
        for layer in self.layers:
            layer.init(params, rng)

    def forward(self, params, x, train):
        for layer in self.layers:
            x = layer.forward(params, x, train)
        return x

    def backward(self, params, g):
        for layer in reversed(self.layers):
            g = layer.backward(params, g)
        return g


class ResidualBlock(Layer):
    """Two 3x3 conv/BN pairs with an identity or 1x1-projection shortcut."""

    def __init__(self, name: str, cin: int, cout: int, stride: int = 1):
        self.main = Sequential(
            [
                Conv2d(name + ".conv1", cin, cout, 3, stride, 1),
                BatchNorm(name + ".bn1", cout),
                ReLU(),
                Conv2d(name + ".conv2", cout, cout, 3, 1, 1),
                BatchNorm(name + ".bn2", cout),
            ]
        )
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(
                [Conv2d(name + ".proj", cin, cout, 1, stride, 0), BatchNorm(name + ".proj_bn", cout)]
            )
        else:
            self.shortcut = None
        self.out_relu = ReLU()

    def init(self, params, rng):
        self.main.init(params, rng)
        if self.shortcut is not None:
            self.shortcut.init(params, rng)

    def forward(self, params, x, train):
        y = self.main.forward(params, x, train)
        y = y + (self.shortcut.forward(params, x, train) if self.shortcut else x)
        return self.out_relu.forward(params, y, train)

    def backward(self, params, g):
        g = self.out_relu.backward(params, g)
        dx = self.main.backward(params, g)
        return dx + (self.shortcut.backward(params, g) if self.shortcut else g)


class GlobalAvgPool(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, params, x, train):
        if train:
            self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, params, g):
        n, h, w, c = self._shape
        return np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c))


class Dense(Layer):
    def __init__(self, name: str, fin: int, fout: int):
        self.name, self.fin, self.fout = name, fin, fout
        self._x = None

    def init(self, params, rng):
        bound = 1.0 / math.sqrt(self.fin)
        params[self.name + ".weight"] = Tensor(rng.uniform(-bound, bound, self.fin * self.fout).reshape(self.fin, self.fout))
        params[self.name + ".bias"] = Tensor(np.zeros(self.fout))

    def forward(self, params, x, train):
        if train:
            self._x = x
        return x @ _f64(params[self.name + ".weight"]) + _f64(params[self.name + ".bias"])

    def backward(self, params, g):
        x, self._x = self._x, None
        wt = params[self.name + ".weight"]
        bt = params[self.name + ".bias"]
        wt.accumulate((x.T @ g))
        bt.accumulate(g.sum(axis=0))
        return g @ _f64(wt).T


def iter_layers(layer):
    """Depth-first walk over a layer graph."""
    yield layer
    if isinstance(layer, Sequential):
        for child in layer.layers:
            yield from iter_layers(child)
    elif isinstance(layer, ResidualBlock):
        yield from iter_layers(layer.main)
        if layer.shortcut is not None:
            yield from iter_layers(layer.shortcut)
        yield from iter_layers(layer.out_relu)

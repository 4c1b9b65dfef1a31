"""Minimal reverse-mode layers for a small fully convolutional network.

Activations are kept channels-first as (C, N, H, W) internally so that every
3x3 convolution is a single matrix product over an im2col buffer whose rows
are contiguous image slabs. Each layer
records what its backward pass needs during ``forward``; calling ``backward``
without a matching forward raises :class:`StaleTapeError`.
"""
from __future__ import annotations

import numpy as np

from .errors import StaleTapeError


class Param:
    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape})"


class Layer:
    def params(self) -> list[Param]:
        return []

    def _pop(self):
        if getattr(self, "_tape", None) is None:
            raise StaleTapeError(f"{type(self).__name__}.backward called without a matching forward")
        tape, self._tape = self._tape, None
        return tape


def _shift(d: int, n: int):
    # (source, destination) slices for reading x[i + d] into position i
    if d < 0:
        return slice(0, n + d), slice(-d, n)
    return slice(d, n), slice(0, n - d)


class Conv2d(Layer):
    """Stride-1 'same' convolution with kernel size 1 or 3."""

    def __init__(self, name: str, cin: int, cout: int, k: int = 3, rng=None, zero: bool = False):
        if k not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.cin, self.cout, self.k = cin, cout, k
        fan_in = cin * k * k
        if zero:
            w = np.zeros((cout, fan_in))
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, fan_in))
        # weight columns are ordered (dy, dx, cin)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(cout))
        self._tape = None

    def params(self):
        return [self.weight, self.bias]

    def _im2col(self, x):
        c, n, h, w = x.shape
        if self.k == 1:
            return x.reshape(c, -1)
        cols = np.zeros((9, c, n, h, w))
        for dy in range(3):
            for dx in range(3):
                ys, yd = _shift(dy - 1, h)
                xs, xd = _shift(dx - 1, w)
                cols[dy * 3 + dx][:, :, yd, xd] = x[:, :, ys, xs]
        return cols.reshape(9 * c, -1)

    def forward(self, x):
        cols = self._im2col(x)
        self._tape = (cols, x.shape)
        c, n, h, w = x.shape
        out = self.weight.data @ cols
        out += self.bias.data[:, None]
        return out.reshape(self.cout, n, h, w)

    def backward(self, g):
        cols, shape = self._pop()
        gm = g.reshape(self.cout, -1)
        self.weight.grad += gm @ cols.T
        self.bias.grad += gm.sum(axis=1)
        dcols = self.weight.data.T @ gm
        c, n, h, w = shape
        if self.k == 1:
            return dcols.reshape(shape)
        dcols = dcols.reshape(9, c, n, h, w)
        dx_ = dcols[4].copy()
        for dy in range(3):
            for dx in range(3):
                if dy == 1 and dx == 1:
                    continue
                ys, yd = _shift(dy - 1, h)
                xs, xd = _shift(dx - 1, w)
                dx_[:, :, ys, xs] += dcols[dy * 3 + dx][:, :, yd, xd]
        return dx_


class ReLU(Layer):
    def __init__(self):
        self._tape = None

    def forward(self, x):
        mask = x > 0
        self._tape = mask
        return x * mask

    def backward(self, g):
        return g * self._pop()


class AvgPool2(Layer):
    def __init__(self):
        self._tape = None

    def forward(self, x):
        c, n, h, w = x.shape
        self._tape = x.shape
        return x.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, g):
        self._pop()
        return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _upsample_matrix(n: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


class Upsample2(Layer):
    """Bilinear 2x upsampling as two fixed separable linear maps."""

    def __init__(self):
        self._tape = None
        self._mats: dict[int, np.ndarray] = {}

    def _mat(self, n):
        if n not in self._mats:
            self._mats[n] = _upsample_matrix(n)
        return self._mats[n]

    def forward(self, x):
        _, _, h, w = x.shape
        mh, mw = self._mat(h), self._mat(w)
        self._tape = (mh, mw)
        y = x @ mw.T
        return np.matmul(mh, y)

    def backward(self, g):
        mh, mw = self._pop()
        g = np.matmul(mh.T, g)
        return g @ mw


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def conv_block(name: str, cin: int, cout: int, rng) -> Sequential:
    return Sequential(Conv2d(f"{name}.0", cin, cout, 3, rng), ReLU(),
                      Conv2d(f"{name}.1", cout, cout, 3, rng), ReLU())


class Adam:
    """Adam with the usual defaults; learning rate is set per step by the caller."""

    def __init__(self, params: list[Param], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

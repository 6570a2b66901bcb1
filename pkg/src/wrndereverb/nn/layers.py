"""Layers with hand-derived backward passes.

Activations are float64 arrays shaped (batch, channels, time, features). Every
layer convolves or normalizes along time/channels only; the feature axis is an
independent broadcast axis.
"""
from __future__ import annotations

import numpy as np

from . import _kernels as _k


class Param:
    """A parameter tensor with its gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


class Layer:
    def params(self) -> list[tuple[str, Param]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []


class Conv1dTime(Layer):
    """Same-padded convolution along time mixing channels, shared across features."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, rng: np.random.Generator | None = None):
        if k % 2 != 1:
            raise ValueError("kernel width must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (c_in * k))
        self.weight = Param(rng.standard_normal((c_out, c_in, k)) * std)
        self.bias = Param(np.zeros(c_out))
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self._x = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def _taps(self, T: int, F: int):
        """(tap index, output slice, input slice) over the flattened T*F axis."""
        h = self.k // 2
        for j in range(self.k):
            d = j - h
            if abs(d) >= T:
                continue
            if d >= 0:
                yield j, slice(0, (T - d) * F), slice(d * F, T * F)
            else:
                yield j, slice(-d * F, T * F), slice(0, (T + d) * F)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        B, C, T, F = x.shape
        if C != self.c_in:
            raise ValueError(f"conv expects {self.c_in} input channels, got {C}")
        W = self.weight.value
        xf = x.reshape(B, C, T * F)
        out = np.zeros((B, self.c_out, T * F))
        for j, so, si in self._taps(T, F):
            # contiguous tap matrix keeps matmul on the BLAS path
            out[:, :, so] += np.matmul(np.ascontiguousarray(W[:, :, j]), xf[:, :, si])
        out += self.bias.value[None, :, None]
        if cache:
            self._x = x
        return out.reshape(B, self.c_out, T, F)

    def backward(self, g: np.ndarray) -> np.ndarray:
        x = self._x
        if x is None:
            raise RuntimeError("backward called before a caching forward pass")
        B, C, T, F = x.shape
        if g.shape != (B, self.c_out, T, F):
            raise ValueError(f"upstream gradient shape {g.shape} does not match output")
        W = self.weight.value
        xf = x.reshape(B, C, T * F)
        gf = g.reshape(B, self.c_out, T * F)
        dx = np.zeros_like(xf)
        gw = self.weight.grad
        for j, so, si in self._taps(T, F):
            for b in range(B):
                gw[:, :, j] += gf[b][:, so] @ xf[b][:, si].T
            dx[:, :, si] += np.matmul(np.ascontiguousarray(W[:, :, j].T), gf[:, :, so])
        self.bias.grad += g.sum(axis=(0, 2, 3))
        self._x = None
        return dx.reshape(x.shape)


def _flat(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    return x.reshape(x.shape[0], x.shape[1], -1)


class BatchNorm(Layer):
    """Per-channel normalization over (batch, time, features)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps
        self.training = True
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        xf = _flat(x)
        if self.training:
            mean, var = _k.channel_moments(xf)
            n = xf.shape[0] * xf.shape[2]
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean
            self.running_var *= 1.0 - m
            self.running_var += m * var * (n / max(n - 1, 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = np.empty_like(xf)
        out = np.empty_like(xf)
        _k.bn_apply(xf, mean, inv_std, self.gamma.value, self.beta.value, xhat, out)
        if cache:
            self._cache = (xhat, inv_std, self.training)
        return out.reshape(x.shape)

    def backward(self, g: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._cache
        self._cache = None
        gf = _flat(g)
        dx = np.empty_like(gf)
        dgamma, dbeta = _k.bn_backward(gf, xhat, self.gamma.value, inv_std, training, dx)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx.reshape(g.shape)

    def __repr__(self):
        return f"BatchNorm({self.gamma.shape[0]})"


class PReLU(Layer):
    """x if x >= 0 else a * x, with a learnable slope per channel."""

    def __init__(self, channels: int, init: float = 0.25):
        self.slope = Param(np.full(channels, init))
        self._x = None

    def params(self):
        return [("slope", self.slope)]

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        xf = _flat(x)
        out = np.empty_like(xf)
        _k.prelu_forward(xf, self.slope.value, out)
        if cache:
            self._x = xf
        return out.reshape(x.shape)

    def backward(self, g: np.ndarray) -> np.ndarray:
        xf = self._x
        self._x = None
        dx = np.empty_like(xf)
        self.slope.grad += _k.prelu_backward(xf, _flat(g), self.slope.value, dx)
        return dx.reshape(g.shape)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, g: np.ndarray) -> np.ndarray:
        mask = self._mask
        self._mask = None
        return np.where(mask, g, 0.0)


def mse_loss(y: np.ndarray, x_enh: np.ndarray):
    """Mean squared error over every frame and feature (and batch item).

    Returns ``(loss, d loss / d x_enh)``.
    """
    y = np.asarray(y, dtype=np.float64)
    x_enh = np.asarray(x_enh, dtype=np.float64)
    if y.shape != x_enh.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {x_enh.shape}")
    diff = x_enh - y
    n = diff.size
    sq = diff * diff
    loss = sq.mean()
    # second pass removes the summation roundoff (exact for constant errors)
    loss += (sq - loss).mean()
    return float(loss), (2.0 / n) * diff

"""Fused elementwise kernels for BatchNorm and PReLU.

Arrays are contiguous (B, C, N) float64 views of (B, C, T, F) activations.
Reductions run in a fixed order, so results are deterministic.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def channel_moments(x):
    B, C, N = x.shape
    mean = np.zeros(C)
    var = np.zeros(C)
    n = B * N
    for c in range(C):
        s = 0.0
        for b in range(B):
            for i in range(N):
                s += x[b, c, i]
        m = s / n
        ss = 0.0
        for b in range(B):
            for i in range(N):
                d = x[b, c, i] - m
                ss += d * d
        mean[c] = m
        var[c] = ss / n
    return mean, var


@njit(cache=True)
def bn_apply(x, mean, inv_std, gamma, beta, xhat, out):
    B, C, N = x.shape
    for b in range(B):
        for c in range(C):
            m, s, g, bt = mean[c], inv_std[c], gamma[c], beta[c]
            for i in range(N):
                h = (x[b, c, i] - m) * s
                xhat[b, c, i] = h
                out[b, c, i] = g * h + bt


@njit(cache=True)
def bn_backward(g, xhat, gamma, inv_std, training, dx):
    """Returns (dgamma, dbeta) and writes the input gradient into dx."""
    B, C, N = g.shape
    dgamma = np.zeros(C)
    dbeta = np.zeros(C)
    n = B * N
    for c in range(C):
        sg = 0.0
        sgx = 0.0
        for b in range(B):
            for i in range(N):
                sg += g[b, c, i]
                sgx += g[b, c, i] * xhat[b, c, i]
        dgamma[c] = sgx
        dbeta[c] = sg
        scale = gamma[c] * inv_std[c]
        if training:
            gm = sg / n
            gxm = sgx / n
            for b in range(B):
                for i in range(N):
                    dx[b, c, i] = scale * (g[b, c, i] - gm - xhat[b, c, i] * gxm)
        else:
            for b in range(B):
                for i in range(N):
                    dx[b, c, i] = scale * g[b, c, i]
    return dgamma, dbeta


@njit(cache=True)
def prelu_forward(x, a, out):
    B, C, N = x.shape
    for b in range(B):
        for c in range(C):
            s = a[c]
            for i in range(N):
                v = x[b, c, i]
                out[b, c, i] = v if v >= 0.0 else s * v


@njit(cache=True)
def prelu_backward(x, g, a, dx):
    B, C, N = x.shape
    da = np.zeros(C)
    for c in range(C):
        s = a[c]
        acc = 0.0
        for b in range(B):
            for i in range(N):
                v = x[b, c, i]
                if v < 0.0:
                    acc += v * g[b, c, i]
                    dx[b, c, i] = s * g[b, c, i]
                else:
                    dx[b, c, i] = g[b, c, i]
        da[c] = acc
    return da

"""Dense building blocks with explicit forward/backward pairs."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    inner = x * x
    inner *= 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    return np.tanh(inner, out=inner)


def gelu(x: np.ndarray) -> np.ndarray:
    t = _gelu_tanh(x)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    t = _gelu_tanh(x)
    x2 = x * x
    # d/dx [0.5 x (1 + tanh(c (x + a x^3)))]
    slope = (1.0 - t * t) * (_GELU_C * (1.0 + 3 * 0.044715 * x2)) * x
    slope += 1.0 + t
    slope *= 0.5
    slope *= dy
    return slope


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def layer_norm_backward(cache, gamma: np.ndarray, dy: np.ndarray):
    xhat, inv = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    dbeta = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Strided convolution (channel-last, im2col)
# ---------------------------------------------------------------------------


def _patches(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 2, pad: int = 1):
    """x (N, H, W, Cin), weight (k, k, Cin, Cout) -> (N, Ho, Wo, Cout)."""
    n, h, w, cin = x.shape
    k = weight.shape[0]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _patches(xp, k, stride, ho, wo).reshape(n * ho * wo, k * k * cin)
    out = cols @ weight.reshape(-1, weight.shape[-1]) + bias
    return out.reshape(n, ho, wo, -1), (x.shape, cols, stride, pad)


def conv2d_backward(cache, weight: np.ndarray, dout: np.ndarray):
    xshape, cols, stride, pad = cache
    n, h, w, cin = xshape
    k = weight.shape[0]
    cout = weight.shape[-1]
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dbias = d2.sum(0)
    dcols = (d2 @ weight.reshape(-1, cout).T).reshape(n, ho, wo, k, k, cin)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad : pad + h, pad : pad + w, :]
    return dx, dweight, dbias

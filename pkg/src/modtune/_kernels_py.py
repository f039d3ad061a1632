"""Pure-numpy reference kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature.
All arrays are C-contiguous float64; 2-D inputs are ``[rows, width]``.
"""

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    mean_d = dxhat.mean(axis=1, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - mean_d - xhat * mean_dx) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu_forward(x):
    """Return ``(y, t)`` where ``t`` is the tanh term reused by the backward pass."""
    t = np.tanh(_GELU_C * (x + _GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, dy):
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z *= 1.0 / z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def adam_dense(theta, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam over whole flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def adam_sparse(theta, g, idx, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam restricted to ``theta[idx]``; ``m``/``v`` are ``len(idx)`` long."""
    gi = g[idx]
    m *= beta1
    m += (1.0 - beta1) * gi
    v *= beta2
    v += (1.0 - beta2) * (gi * gi)
    theta[idx] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

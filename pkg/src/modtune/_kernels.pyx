# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


def layer_norm_forward(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    y_arr = np.empty((n, h))
    xhat_arr = np.empty((n, h))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(h):
                mu += x[i, j]
            mu /= h
            var = 0.0
            for j in range(h):
                d = x[i, j] - mu
                var += d * d
            var /= h
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(h):
                d = (x[i, j] - mu) * r
                xhat[i, j] = d
                y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(double[:, ::1] dy, double[:, ::1] xhat, double[::1] rstd, double[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], h = dy.shape[1], i, j
    dx_arr = np.empty((n, h))
    dgamma_arr = np.zeros(h)
    dbeta_arr = np.zeros(h)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double mean_d, mean_dx, g
    with nogil:
        for i in range(n):
            mean_d = 0.0
            mean_dx = 0.0
            for j in range(h):
                g = dy[i, j]
                dgamma[j] += g * xhat[i, j]
                dbeta[j] += g
                g = g * gamma[j]
                mean_d += g
                mean_dx += g * xhat[i, j]
            mean_d /= h
            mean_dx /= h
            for j in range(h):
                dx[i, j] = (dy[i, j] * gamma[j] - mean_d - xhat[i, j] * mean_dx) * rstd[i]
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_forward(x):
    """Return ``(y, t)`` where ``t`` is the tanh term reused by the backward pass."""
    src = np.ascontiguousarray(x, dtype=np.float64)
    t_arr = np.empty_like(src)
    out = np.empty_like(src)
    cdef double[::1] a = src.reshape(-1)
    cdef double[::1] t = t_arr.reshape(-1)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = a[i]
            t[i] = GELU_C * (v + GELU_K * v * v * v)
    np.tanh(t_arr, out=t_arr)
    with nogil:
        for i in range(n):
            o[i] = 0.5 * a[i] * (1.0 + t[i])
    return out, t_arr


def gelu_backward(x, t, dy):
    src = np.ascontiguousarray(x, dtype=np.float64)
    tsrc = np.ascontiguousarray(t, dtype=np.float64)
    gsrc = np.ascontiguousarray(dy, dtype=np.float64)
    out = np.empty_like(src)
    cdef double[::1] a = src.reshape(-1)
    cdef double[::1] th = tsrc.reshape(-1)
    cdef double[::1] g = gsrc.reshape(-1)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double v, tv
    with nogil:
        for i in range(n):
            v = a[i]
            tv = th[i]
            o[i] = g[i] * (0.5 * (1.0 + tv) + 0.5 * v * (1.0 - tv * tv) * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return out


def softmax_forward(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], i, j
    y_arr = np.empty((n, h))
    cdef double[:, ::1] y = y_arr
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, h):
                if x[i, j] > mx:
                    mx = x[i, j]
            for j in range(h):
                y[i, j] = x[i, j] - mx
    np.exp(y_arr, out=y_arr)
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(h):
                s += y[i, j]
            s = 1.0 / s
            for j in range(h):
                y[i, j] = y[i, j] * s
    return y_arr


def softmax_backward(double[:, ::1] y, double[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], h = y.shape[1], i, j
    dx_arr = np.empty((n, h))
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(h):
                s += dy[i, j] * y[i, j]
            for j in range(h):
                dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx_arr


def adam_dense(double[::1] theta, double[::1] g, double[::1] m, double[::1] v,
               double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double gi
    with nogil:
        for i in range(n):
            gi = g[i]
            m[i] = m[i] * beta1 + (1.0 - beta1) * gi
            v[i] = v[i] * beta2 + (1.0 - beta2) * (gi * gi)
            theta[i] = theta[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


def adam_sparse(double[::1] theta, double[::1] g, long[::1] idx, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double bc1, double bc2):
    cdef Py_ssize_t k, i, n = idx.shape[0]
    cdef double gi
    with nogil:
        for k in range(n):
            i = idx[k]
            gi = g[i]
            m[k] = m[k] * beta1 + (1.0 - beta1) * gi
            v[k] = v[k] * beta2 + (1.0 - beta2) * (gi * gi)
            theta[i] = theta[i] - lr * (m[k] / bc1) / (sqrt(v[k] / bc2) + eps)

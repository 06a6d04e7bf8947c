# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the fused kernels in ``_pykernels``.

Elementwise kernels operate on flat C-contiguous float64 buffers; the
dispatcher reshapes around them.
"""

import numpy as np

from libc.math cimport exp, log, log1p


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        e = exp(-x)
        return 1.0 / (1.0 + e)
    e = exp(x)
    return e / (1.0 + e)


def softplus(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _softplus(x[i])
    return out


def sigmoid(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _sigmoid(x[i])
    return out


def reparam_forward(const double[::1] mu, const double[::1] rho, const double[:, ::1] eps):
    cdef Py_ssize_t s, j, S = eps.shape[0], n = eps.shape[1]
    if mu.shape[0] != n or rho.shape[0] != n:
        raise ValueError("reparam_forward: parameter length does not match noise width")
    out = np.empty((S, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    sig_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] sig = sig_arr
    with nogil:
        for j in range(n):
            sig[j] = _softplus(rho[j])
        for s in range(S):
            for j in range(n):
                o[s, j] = mu[j] + sig[j] * eps[s, j]
    return out


def reparam_backward(const double[::1] rho, const double[:, ::1] eps, const double[:, ::1] grad):
    cdef Py_ssize_t s, j, S = eps.shape[0], n = eps.shape[1]
    if grad.shape[0] != S or grad.shape[1] != n or rho.shape[0] != n:
        raise ValueError("reparam_backward: shape mismatch")
    gmu_arr = np.zeros(n, dtype=np.float64)
    grho_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] gmu = gmu_arr
    cdef double[::1] grho = grho_arr
    cdef double g
    with nogil:
        for s in range(S):
            for j in range(n):
                g = grad[s, j]
                gmu[j] += g
                grho[j] += g * eps[s, j]
        for j in range(n):
            grho[j] *= _sigmoid(rho[j])
    return gmu_arr, grho_arr


def gauss_kl(const double[::1] mu, const double[::1] rho,
             const double[::1] target_mean, const double[::1] target_var):
    cdef Py_ssize_t j, n = mu.shape[0]
    cdef double total = 0.0, sigma, diff
    with nogil:
        for j in range(n):
            sigma = _softplus(rho[j])
            diff = mu[j] - target_mean[j]
            total += (0.5 * log(target_var[j]) - log(sigma)
                      + (sigma * sigma + diff * diff) / (2.0 * target_var[j]) - 0.5)
    return total


def gauss_kl_grad(const double[::1] mu, const double[::1] rho,
                  const double[::1] target_mean, const double[::1] target_var):
    cdef Py_ssize_t j, n = mu.shape[0]
    gmu_arr = np.empty(n, dtype=np.float64)
    grho_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] gmu = gmu_arr
    cdef double[::1] grho = grho_arr
    cdef double sigma
    with nogil:
        for j in range(n):
            sigma = _softplus(rho[j])
            gmu[j] = (mu[j] - target_mean[j]) / target_var[j]
            grho[j] = (sigma / target_var[j] - 1.0 / sigma) * _sigmoid(rho[j])
    return gmu_arr, grho_arr


def softmax_xent(const double[:, ::1] logits, const long long[::1] labels):
    cdef Py_ssize_t i, k, M = logits.shape[0], C = logits.shape[1]
    if labels.shape[0] != M:
        raise ValueError("softmax_xent: label count does not match rows")
    loss_arr = np.empty(M, dtype=np.float64)
    probs_arr = np.empty((M, C), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] probs = probs_arr
    cdef double zmax, total
    with nogil:
        for i in range(M):
            zmax = logits[i, 0]
            for k in range(1, C):
                if logits[i, k] > zmax:
                    zmax = logits[i, k]
            total = 0.0
            for k in range(C):
                probs[i, k] = exp(logits[i, k] - zmax)
                total += probs[i, k]
            for k in range(C):
                probs[i, k] /= total
            loss[i] = log(total) - (logits[i, labels[i]] - zmax)
    return loss_arr, probs_arr

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the reference layer-stat kernels.

Single pass per (draw, sample): inner products, child log densities and the
three reductions are fused, and the banded structure of the weight matrix is
exploited directly instead of materializing rate tensors.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport lgamma, log

cnp.import_array()

cdef double RATE_FLOOR = 1e-8


def obs_layer_stats(double[:, ::1] counts, double[:, ::1] mask, double[:, ::1] lgx,
                    double[:, :, ::1] z_bottom, double[:, ::1] w_free,
                    Py_ssize_t filter_size, Py_ssize_t stride, bint tied):
    cdef Py_ssize_t B = z_bottom.shape[0]
    cdef Py_ssize_t N = z_bottom.shape[1]
    cdef Py_ssize_t K = z_bottom.shape[2]
    cdef Py_ssize_t V = counts.shape[1]
    cdef Py_ssize_t F = filter_size if tied else K * filter_size

    col_sums_arr = np.zeros((B, N, K), dtype=np.float64)
    par_sums_arr = np.zeros((B, F), dtype=np.float64)
    totals_arr = np.zeros((B, N), dtype=np.float64)
    scratch_arr = np.empty(V, dtype=np.float64)

    cdef double[:, :, ::1] col_sums = col_sums_arr
    cdef double[:, ::1] par_sums = par_sums_arr
    cdef double[:, ::1] totals = totals_arr
    cdef double[::1] c = scratch_arr

    cdef Py_ssize_t b, n, i, j, r, base, woff
    cdef double zj, rate, tot, acc

    with nogil:
        for b in range(B):
            for n in range(N):
                for i in range(V):
                    c[i] = 0.0
                for j in range(K):
                    zj = z_bottom[b, n, j]
                    base = j * stride
                    woff = 0 if tied else j * filter_size
                    for r in range(filter_size):
                        c[base + r] += zj * w_free[b, woff + r]
                tot = 0.0
                for i in range(V):
                    rate = c[i]
                    if rate < RATE_FLOOR:
                        rate = RATE_FLOOR
                    if mask[n, i] != 0.0:
                        c[i] = counts[n, i] * log(rate) - rate - lgx[n, i]
                    else:
                        c[i] = 0.0
                    tot += c[i]
                totals[b, n] = tot
                for j in range(K):
                    acc = 0.0
                    base = j * stride
                    for r in range(filter_size):
                        acc += c[base + r]
                    col_sums[b, n, j] = acc
                if tied:
                    for r in range(filter_size):
                        acc = 0.0
                        for j in range(K):
                            acc += c[j * stride + r]
                        par_sums[b, r] += acc
                else:
                    for j in range(K):
                        for r in range(filter_size):
                            par_sums[b, j * filter_size + r] += c[j * stride + r]

    return col_sums_arr, par_sums_arr, totals_arr


def latent_layer_stats(double[:, :, ::1] z_lower, double alpha,
                       double[:, :, ::1] z_upper, double[:, ::1] w_free,
                       Py_ssize_t filter_size, Py_ssize_t stride, bint tied):
    cdef Py_ssize_t B = z_upper.shape[0]
    cdef Py_ssize_t N = z_upper.shape[1]
    cdef Py_ssize_t K_up = z_upper.shape[2]
    cdef Py_ssize_t K_lo = z_lower.shape[2]
    cdef Py_ssize_t F = filter_size if tied else K_up * filter_size

    self_arr = np.empty((B, N, K_lo), dtype=np.float64)
    col_sums_arr = np.zeros((B, N, K_up), dtype=np.float64)
    par_sums_arr = np.zeros((B, F), dtype=np.float64)
    totals_arr = np.zeros((B, N), dtype=np.float64)
    scratch_arr = np.empty(K_lo, dtype=np.float64)

    cdef double[:, :, ::1] self_logp = self_arr
    cdef double[:, :, ::1] col_sums = col_sums_arr
    cdef double[:, ::1] par_sums = par_sums_arr
    cdef double[:, ::1] totals = totals_arr
    cdef double[::1] c = scratch_arr

    cdef double lg_alpha = lgamma(alpha)
    cdef Py_ssize_t b, n, i, j, r, base, woff
    cdef double zj, mean, beta, v, tot, acc

    with nogil:
        for b in range(B):
            for n in range(N):
                for i in range(K_lo):
                    c[i] = 0.0
                for j in range(K_up):
                    zj = z_upper[b, n, j]
                    base = j * stride
                    woff = 0 if tied else j * filter_size
                    for r in range(filter_size):
                        c[base + r] += zj * w_free[b, woff + r]
                tot = 0.0
                for i in range(K_lo):
                    mean = c[i]
                    if mean < RATE_FLOOR:
                        mean = RATE_FLOOR
                    beta = alpha / mean
                    v = (alpha - 1.0) * log(z_lower[b, n, i]) - beta * z_lower[b, n, i] \
                        - lg_alpha + alpha * log(beta)
                    c[i] = v
                    self_logp[b, n, i] = v
                    tot += v
                totals[b, n] = tot
                for j in range(K_up):
                    acc = 0.0
                    base = j * stride
                    for r in range(filter_size):
                        acc += c[base + r]
                    col_sums[b, n, j] = acc
                if tied:
                    for r in range(filter_size):
                        acc = 0.0
                        for j in range(K_up):
                            acc += c[j * stride + r]
                        par_sums[b, r] += acc
                else:
                    for j in range(K_up):
                        for r in range(filter_size):
                            par_sums[b, j * filter_size + r] += c[j * stride + r]

    return self_arr, col_sums_arr, par_sums_arr, totals_arr

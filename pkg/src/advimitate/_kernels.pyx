# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels; ``_kernels_py.py`` holds the reference fallbacks."""

import numpy as np
from libc.math cimport exp, fabs, log, sqrt, pow

# moments below this are flushed to zero so they never become subnormal
cdef double MOMENT_FLOOR = 1e-150


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double c1, double c2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi
    cdef double step = lr / c1
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            if fabs(mi) < MOMENT_FLOOR:
                mi = 0.0
            if vi < MOMENT_FLOOR:
                vi = 0.0
            m[i] = mi
            v[i] = vi
            p[i] -= step * mi / (sqrt(vi / c2) + eps)


def gae_advantages(double[::1] rewards, double[::1] values, double gamma, double lam):
    cdef Py_ssize_t t, n = rewards.shape[0]
    out = np.empty(n)
    cdef double[::1] adv = out
    cdef double acc = 0.0, delta
    with nogil:
        for t in range(n - 1, -1, -1):
            delta = rewards[t] + gamma * values[t + 1] - values[t]
            acc = delta + gamma * lam * acc
            adv[t] = acc
    return out


def discounted_occupancy(long long[::1] bins, long long[::1] steps, double gamma, Py_ssize_t n_bins):
    cdef Py_ssize_t i, n = bins.shape[0]
    out = np.zeros(n_bins)
    cdef double[::1] hist = out
    cdef double total = 0.0, w, log_gamma = log(gamma) if gamma > 0 else 0.0
    with nogil:
        for i in range(n):
            # exp(k log gamma) is several times cheaper than pow(gamma, k)
            w = exp(steps[i] * log_gamma) if gamma > 0 else pow(gamma, <double>steps[i])
            hist[bins[i]] += w
            total += w
        if total > 0:
            for i in range(n_bins):
                hist[i] /= total
    return out

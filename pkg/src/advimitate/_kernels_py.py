"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


MOMENT_FLOOR = 1e-150


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place bias-corrected Adam step on flat float64 arrays.

    Moments below ``MOMENT_FLOOR`` are flushed to zero: weights that stop
    receiving gradient would otherwise decay into subnormal floats, which
    are an order of magnitude slower to process.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    m[np.abs(m) < MOMENT_FLOOR] = 0.0
    v *= beta2
    v += (1.0 - beta2) * g * g
    v[v < MOMENT_FLOOR] = 0.0
    denom = np.sqrt(v / c2)
    denom += eps
    p -= (lr / c1) * m / denom


def gae_advantages(rewards, values, gamma, lam):
    n = len(rewards)
    adv = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


def discounted_occupancy(bins, steps, gamma, n_bins):
    """Histogram of ``gamma**step`` weights per bin, normalised to sum 1."""
    hist = np.zeros(n_bins)
    np.add.at(hist, np.asarray(bins, dtype=np.int64), gamma ** np.asarray(steps, dtype=float))
    total = hist.sum()
    return hist / total if total > 0 else hist

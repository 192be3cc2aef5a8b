"""Kernel dispatch: compiled ``_kernels`` when built, numpy fallback otherwise.

Set ``ADVIMITATE_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("ADVIMITATE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    _impl.adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2)


def gae_advantages(rewards, values, gamma, lam):
    return _impl.gae_advantages(np.ascontiguousarray(rewards, dtype=np.float64),
                                np.ascontiguousarray(values, dtype=np.float64),
                                float(gamma), float(lam))


def discounted_occupancy(bins, steps, gamma, n_bins):
    return _impl.discounted_occupancy(np.ascontiguousarray(bins, dtype=np.int64),
                                      np.ascontiguousarray(steps, dtype=np.int64),
                                      float(gamma), int(n_bins))

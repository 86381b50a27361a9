"""Central finite-difference oracle, independent of the tape."""
from __future__ import annotations

import numpy as np


def numeric_grad(f, arrays, step=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array.

    ``f`` must rebuild its result from the arrays each call; arrays are perturbed
    in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """Worst-case elementwise relative error.

    Entries where both values are below ``floor`` in magnitude compare as
    absolute differences (a relative error is meaningless near zero).
    """
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0

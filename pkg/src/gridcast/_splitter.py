"""Compiled kernels for the tree split search and node partitioning."""

import numpy as np
from numba import njit


@njit(cache=True)
def best_split(XT, y, order, min_leaf):
    """Best squared-error split of the rows in ``order``.

    ``order`` holds the node's row indices sorted by each feature, shape
    ``(n_features, n_rows)``. Returns ``(gain, feature, position)`` where
    the left child takes the first ``position + 1`` rows of the sorted
    order, or ``(-1.0, -1, -1)`` when no admissible split reduces the error.
    """
    n_feat, n = order.shape
    if n < 2 or n < 2 * min_leaf:
        return -1.0, -1, -1
    s = 0.0
    ss = 0.0
    for i in range(n):
        v = y[order[0, i]]
        s += v
        ss += v * v
    mean = s / n
    floor = 1e-12 * ss + 1e-300
    best = -1.0
    best_f = -1
    best_j = -1
    for f in range(n_feat):
        cum = 0.0
        for j in range(n - 1):
            r = order[f, j]
            cum += y[r] - mean
            k = j + 1
            if k < min_leaf or n - k < min_leaf:
                continue
            if not XT[f, r] < XT[f, order[f, j + 1]]:
                continue
            g = cum * cum * (n / (k * (n - k)))
            if g > best:
                best = g
                best_f = f
                best_j = j
    if best <= floor:
        return -1.0, -1, -1
    return best, best_f, best_j


@njit(cache=True)
def partition(order, goes_left, n_left):
    """Split every row of ``order`` into left/right parts, keeping sort order."""
    n_feat, n = order.shape
    left = np.empty((n_feat, n_left), dtype=order.dtype)
    right = np.empty((n_feat, n - n_left), dtype=order.dtype)
    for f in range(n_feat):
        a = 0
        b = 0
        for j in range(n):
            r = order[f, j]
            if goes_left[r]:
                left[f, a] = r
                a += 1
            else:
                right[f, b] = r
                b += 1
    return left, right

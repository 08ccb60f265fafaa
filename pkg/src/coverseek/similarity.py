"""Cosine similarity and the MaxMean set-to-set measure.

MaxMean compares two sequences of local embeddings: every row of the first
set is matched against its best cosine partner in the second set, and the
per-row maxima are averaged.  The measure is intentionally non-commutative;
callers that want the shorter-sequence-first convention use
:func:`maxmean_ordered`.

Floating-point behaviour is pinned down so tests can require exact equality
with a naive double-loop evaluation: per-pair ``np.dot`` for the inner
products and plain left-to-right accumulation of the per-row maxima (no
compensated summation).
"""

import numpy as np


def cosine(x, y) -> float:
    """Cosine similarity of two vectors.

    Raises ``ValueError`` on dimension mismatch or zero-norm input.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("cosine expects 1-D vectors")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine is undefined for zero vectors")
    return float(np.dot(x, y) / (nx * ny))


def maxmean(x_set, y_set) -> float:
    """MaxMean(X, Y): mean over rows x_i of max_j cos(x_i, y_j).

    The first operand drives the mean, so the measure is not symmetric.
    No reordering is applied here; see :func:`maxmean_ordered`.
    """
    x_set = np.asarray(x_set, dtype=np.float64)
    y_set = np.asarray(y_set, dtype=np.float64)
    if x_set.ndim != 2 or y_set.ndim != 2:
        raise ValueError("maxmean expects 2-D row matrices")
    if x_set.shape[0] == 0 or y_set.shape[0] == 0:
        raise ValueError("maxmean is undefined for empty sets")
    if x_set.shape[1] != y_set.shape[1]:
        raise ValueError(
            f"dimension mismatch: {x_set.shape[1]} vs {y_set.shape[1]}"
        )
    nx = [np.linalg.norm(row) for row in x_set]
    ny = [np.linalg.norm(row) for row in y_set]
    if min(nx) == 0.0 or min(ny) == 0.0:
        raise ValueError("maxmean is undefined for zero rows")
    total = 0.0
    for i in range(x_set.shape[0]):
        best = -np.inf
        for j in range(y_set.shape[0]):
            c = np.dot(x_set[i], y_set[j]) / (nx[i] * ny[j])
            if c > best:
                best = c
        total += best
    return total / x_set.shape[0]


def maxmean_ordered(a_set, b_set) -> float:
    """MaxMean with the shorter sequence as first operand.

    When both sets have the same number of rows, ``a_set`` goes first.
    """
    a_set = np.asarray(a_set, dtype=np.float64)
    b_set = np.asarray(b_set, dtype=np.float64)
    if a_set.ndim != 2 or b_set.ndim != 2:
        raise ValueError("maxmean_ordered expects 2-D row matrices")
    if a_set.shape[0] <= b_set.shape[0]:
        return maxmean(a_set, b_set)
    return maxmean(b_set, a_set)

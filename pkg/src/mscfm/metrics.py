"""Two-sample energy distance."""
import numpy as np
from scipy.spatial.distance import cdist


def _mean_pairwise(X, Y, block=1024):
    total = 0.0
    for i in range(0, len(X), block):
        total += cdist(X[i:i + block], Y).sum()
    return total / (len(X) * len(Y))


def energy_distance(X, Y) -> float:
    """``2 E|X - Y| - E|X - X'| - E|Y - Y'|`` over all sample pairs (V-statistic).

    Non-negative, and exactly zero for identical sample sets.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample dimensions differ")
    ed = 2 * _mean_pairwise(X, Y) - _mean_pairwise(X, X) - _mean_pairwise(Y, Y)
    return max(ed, 0.0)

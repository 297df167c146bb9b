"""Numeric helpers shared by the test suites"""

import numpy as np


def relative_error(a, b):
    """max |a - b| scaled by max |b|"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def random_orthonormal(rng, n, d):
    Q, _ = np.linalg.qr(rng.normal(size=(n, d)))
    return Q

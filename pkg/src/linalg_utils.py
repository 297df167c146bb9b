"""
Dense numerical kernels
SVD, spectral norm, least squares, inverse-Gram traces, condition numbers and the
fast Walsh-Hadamard transform. Everything that needs (X^T X)^-1 goes through the SVD.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from hash_utils import is_power_of_two
from sketchreg_config import get_config
from sketchreg_errors import ContractViolation, NumericalFailure


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD truncated to numerical rank: M ~= U diag(sigma) V^T"""
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self):
        return len(self.sigma)


def as_matrix(M, name='matrix'):
    """Coerce to a finite 2-D float64 array"""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2:
        raise ContractViolation(f"{name} must be 2-dimensional, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalFailure(f"{name} contains non-finite entries")
    return M


def singular_values(M):
    """All singular values, descending (no rank truncation)"""
    M = as_matrix(M)
    if M.size == 0:
        return np.zeros(0)
    return scipy.linalg.svdvals(M)


def svd(M):
    """Thin SVD keeping singular values above sigma_1 * rank_rtol"""
    M = as_matrix(M)
    rows, cols = M.shape
    if M.size == 0:
        return SvdFactors(np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0)))
    U, s, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver='gesdd')
    if s[0] == 0.0:
        r = 0
    else:
        r = int(np.sum(s > s[0] * get_config('rank_rtol')))
    return SvdFactors(U[:, :r], s[:r], Vt[:r].T)


def spectral_norm(M):
    """sigma_max(M), the operator 2-norm"""
    s = singular_values(M)
    return float(s[0]) if s.size else 0.0


def ols_solve(X, Y):
    """Minimum-norm least-squares solution via the SVD pseudoinverse"""
    X = as_matrix(X, 'X')
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"X has {X.shape[0]} rows but Y has {Y.shape[0]} entries")
    if not np.all(np.isfinite(Y)):
        raise NumericalFailure("Y contains non-finite entries")
    f = svd(X)
    if f.rank == 0:
        return np.zeros(X.shape[1])
    return f.V @ ((f.U.T @ Y) / f.sigma)


def inverse_gram(X):
    """(X^T X)^-1 assembled from the SVD of X; requires full column rank"""
    X = as_matrix(X, 'X')
    f = svd(X)
    if f.rank < X.shape[1]:
        raise NumericalFailure(f"matrix has rank {f.rank} < {X.shape[1]} columns")
    scaled = f.V / f.sigma
    return scaled @ scaled.T


def trace_inv_gram(X):
    """trace((X^T X)^-1) = sum_i sigma_i^-2"""
    X = as_matrix(X, 'X')
    f = svd(X)
    if f.rank < X.shape[1]:
        raise NumericalFailure(f"matrix has rank {f.rank} < {X.shape[1]} columns; (X^T X) is singular")
    return float(np.sum(f.sigma ** -2.0))


def condition_number(X):
    """kappa = sigma_max / sigma_min (inf when singular)"""
    s = singular_values(X)
    if s.size == 0:
        raise ContractViolation("condition number of an empty matrix")
    if s[-1] == 0.0:
        return float('inf')
    return float(s[0] / s[-1])


def fwht(v):
    """Unnormalised Walsh-Hadamard transform along axis 0, O(m log m) butterflies"""
    x = np.array(v, dtype=np.float64)
    m = x.shape[0]
    if not is_power_of_two(m):
        raise ContractViolation(f"Walsh-Hadamard transform needs a power-of-two length, got {m}")
    tail = x.shape[1:]
    h = 1
    while h < m:
        x = x.reshape((m // (2 * h), 2, h) + tail)
        a = x[:, 0]
        b = x[:, 1]
        x = np.stack((a + b, a - b), axis=1)
        h *= 2
    return x.reshape((m,) + tail)


def hadamard_entry_sign(r, c):
    """H[r, c] = (-1)^popcount(r AND c), vectorised over integer arrays"""
    x = np.bitwise_and(np.asarray(r, dtype=np.uint64), np.asarray(c, dtype=np.uint64))
    for shift in (32, 16, 8, 4, 2, 1):
        x = x ^ (x >> np.uint64(shift))
    return 1.0 - 2.0 * (x & np.uint64(1)).astype(np.float64)


def sqrtm_psd(A):
    """Symmetric PSD square root via eigendecomposition; tiny negative eigenvalues clip to 0"""
    A = as_matrix(A)
    A = 0.5 * (A + A.T)
    w, Q = scipy.linalg.eigh(A)
    w = np.clip(w, 0.0, None)
    return (Q * np.sqrt(w)) @ Q.T

"""
Conjugate Gaussian posteriors for linear regression on original or sketched data

A Gaussian prior N(m, sigma^2 (S^T S)^-1) is folded into the likelihood as d
extra pseudo-observations [S, S m] below the (sketched) data, so the posterior
is the least-squares problem ||Z beta - z||^2 with Z = [PiX; S], z = [PiY; Sm].
The prior block is never sketched.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from data_utils import export_tables
from linalg_utils import as_matrix, ols_solve, svd
from sketch_utils import split_sketch
from sketchreg_config import get_config
from sketchreg_errors import ContractViolation, NumericalFailure, SingularPosterior

logger = logging.getLogger(__name__)

ESTIMATE = 'estimate'


class PriorKind(Enum):
    UNIFORM = 'uniform'
    GAUSSIAN = 'gaussian'


def _check_sigma(sigma):
    if sigma == ESTIMATE:
        return sigma
    try:
        sigma = float(sigma)
    except (TypeError, ValueError):
        raise ContractViolation(f"sigma must be a positive number or {ESTIMATE!r}, got {sigma!r}")
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ContractViolation(f"sigma must be a positive number, got {sigma}")
    return sigma


@dataclass(frozen=True)
class PriorSpec:
    """Improper uniform prior, or Gaussian with mean m and covariance sigma^2 (S^T S)^-1"""
    kind: PriorKind
    m: np.ndarray = None
    S: np.ndarray = None
    sigma: object = ESTIMATE

    @classmethod
    def uniform(cls, sigma=ESTIMATE):
        return cls(PriorKind.UNIFORM, sigma=_check_sigma(sigma))

    @classmethod
    def gaussian(cls, m, S, sigma=ESTIMATE):
        S = as_matrix(S, 'S')
        m = np.asarray(m, dtype=np.float64).reshape(-1)
        d = S.shape[1]
        if S.shape[0] != d:
            raise ContractViolation(f"S must be square, got shape {S.shape}")
        if m.shape[0] != d:
            raise ContractViolation(f"prior mean has length {m.shape[0]}, S has {d} columns")
        if not np.all(np.isfinite(m)):
            raise NumericalFailure("prior mean contains non-finite entries")
        if svd(S).rank < d:
            raise ContractViolation("prior matrix S must have full rank")
        return cls(PriorKind.GAUSSIAN, m=m, S=S, sigma=_check_sigma(sigma))

    @property
    def is_gaussian(self):
        return self.kind is PriorKind.GAUSSIAN

    @property
    def d(self):
        return None if self.S is None else self.S.shape[1]

    def with_sigma(self, sigma):
        return PriorSpec(self.kind, m=self.m, S=self.S, sigma=_check_sigma(sigma))

    def measure(self, sigma):
        """The prior itself as a GaussianMeasure"""
        if not self.is_gaussian:
            raise ContractViolation("an improper uniform prior is not a probability measure")
        return posterior(augment(np.zeros((0, self.d)), np.zeros(0), self), sigma)


@dataclass(frozen=True)
class GaussianMeasure:
    """N(mean, cov) over the coefficient vector

    cov only has to be positive semi-definite here so that point masses can be
    represented; posteriors are checked for definiteness where they are built.
    """
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if np.size(self.cov) != mean.shape[0] ** 2:
            raise ContractViolation(f"covariance must be {mean.shape[0]} x {mean.shape[0]}, got shape {np.shape(self.cov)}")
        cov = np.asarray(self.cov, dtype=np.float64).reshape(mean.shape[0], mean.shape[0])
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NumericalFailure("Gaussian measure has non-finite parameters")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if not np.allclose(cov, cov.T, rtol=0.0, atol=get_config('symmetry_atol') * scale):
            raise NumericalFailure("covariance matrix is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if cov.size and np.linalg.eigvalsh(cov)[0] < -get_config('symmetry_atol') * scale:
            raise NumericalFailure("covariance matrix is not positive semi-definite")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)

    @classmethod
    def point_mass(cls, point):
        point = np.asarray(point, dtype=np.float64).reshape(-1)
        return cls(point, np.zeros((point.shape[0], point.shape[0])))

    @property
    def d(self):
        return self.mean.shape[0]

    @property
    def sd(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def centered(self):
        return GaussianMeasure(np.zeros(self.d), self.cov)

    def is_positive_definite(self):
        return self.d == 0 or np.linalg.eigvalsh(self.cov)[0] > 0


@dataclass(frozen=True)
class AugmentedSystem:
    """Z = [data rows; S], z = [response; S m]; the last prior_rows rows are the prior block"""
    Z: np.ndarray
    z: np.ndarray
    prior_rows: int = 0

    @property
    def data_rows(self):
        return self.Z.shape[0] - self.prior_rows


def augment(sketched_X, sketched_Y, prior):
    """Stack the Gaussian prior block [S, S m] under the (sketched) data"""
    X = as_matrix(sketched_X, 'sketched X')
    Y = np.asarray(sketched_Y, dtype=np.float64).reshape(-1)
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"sketched X has {X.shape[0]} rows but sketched Y has {Y.shape[0]}")
    if not prior.is_gaussian:
        return AugmentedSystem(X, Y, 0)
    if prior.d != X.shape[1]:
        raise ContractViolation(f"prior has dimension {prior.d} but the data has {X.shape[1]} variables")
    Z = np.vstack([X, prior.S])
    z = np.concatenate([Y, prior.S @ prior.m])
    return AugmentedSystem(Z, z, prior.d)


def posterior(system, sigma):
    """Posterior N(argmin ||Z beta - z||, sigma^2 (Z^T Z)^-1) computed from the SVD of Z"""
    sigma = _check_sigma(sigma)
    if sigma == ESTIMATE:
        raise ContractViolation("posterior needs a numeric sigma; call fit_posterior to estimate it")
    Z = as_matrix(system.Z, 'Z')
    z = np.asarray(system.z, dtype=np.float64).reshape(-1)
    d = Z.shape[1]
    f = svd(Z)
    if f.rank < d:
        raise SingularPosterior(f"regression system has rank {f.rank} < {d}; the posterior is improper")
    # full rank means every kept sigma_i > 0, so V diag(sigma^-2) V^T is positive definite
    mean = f.V @ ((f.U.T @ z) / f.sigma)
    scaled = f.V / f.sigma
    cov = sigma * sigma * (scaled @ scaled.T)
    return GaussianMeasure(mean, cov)


def posterior_from_data(X, Y, prior, sigma=None):
    """Exact posterior on unsketched data (or on any [PiX, PiY])"""
    sigma = prior.sigma if sigma is None else sigma
    return posterior(augment(X, Y, prior), sigma)


def estimate_sigma(sketched_X, sketched_Y, beta_hat, n):
    """Plug-in noise scale ||PiX beta - PiY|| / sqrt(n), n the original row count"""
    n = int(n)
    if n < 1:
        raise ContractViolation(f"original row count n must be >= 1, got {n}")
    X = as_matrix(sketched_X, 'sketched X')
    residual = X @ np.asarray(beta_hat, dtype=np.float64).reshape(-1) - np.asarray(sketched_Y).reshape(-1)
    return float(np.linalg.norm(residual) / math.sqrt(n))


def fit_posterior(sketched_X, sketched_Y, prior, n=None, sigma=None):
    """Posterior with sigma from the prior, the argument, or the plug-in estimate

    The estimate uses the least-squares fit on the sketch and needs the
    original row count n. Returns (measure, sigma_used).
    """
    sigma = _check_sigma(prior.sigma if sigma is None else sigma)
    if sigma == ESTIMATE:
        if n is None:
            raise ContractViolation("estimating sigma needs the original row count n")
        beta_hat = ols_solve(sketched_X, sketched_Y)
        sigma = estimate_sigma(sketched_X, sketched_Y, beta_hat, n)
        logger.info("estimated sigma = %.6g from the sketch residual (n=%d)", sigma, n)
        if not sigma > 0:
            raise NumericalFailure("estimated sigma is 0 (the data are fit exactly); pass sigma explicitly")
    return posterior(augment(sketched_X, sketched_Y, prior), sigma), sigma


def posterior_from_sketch(sketch, prior, n=None, sigma=None):
    """fit_posterior on a finalized k x d_total sketch [PiX, PiY]"""
    PiX, PiY = split_sketch(sketch)
    return fit_posterior(PiX, PiY, prior, n=n, sigma=sigma)


def posterior_from_gram(gram, prior, sigma):
    """Posterior from X^T [X, Y] via the normal equations

    This is the unstable baseline: squaring the condition number is exactly
    what the embedding path avoids.
    """
    gram = as_matrix(gram, 'gram sketch')
    d = gram.shape[0]
    if gram.shape[1] != d + 1:
        raise ContractViolation(f"gram sketch must be d x (d+1), got shape {gram.shape}")
    sigma = _check_sigma(prior.sigma if sigma is None else sigma)
    if sigma == ESTIMATE:
        raise ContractViolation("a gram sketch carries no residual; sigma must be given")
    A = gram[:, :-1].copy()
    b = gram[:, -1].copy()
    if prior.is_gaussian:
        if prior.d != d:
            raise ContractViolation(f"prior has dimension {prior.d} but the gram sketch has {d} variables")
        StS = prior.S.T @ prior.S
        A += StS
        b += StS @ prior.m
    A = 0.5 * (A + A.T)
    try:
        mean = np.linalg.solve(A, b)
        cov = sigma * sigma * np.linalg.inv(A)
    except np.linalg.LinAlgError as e:
        raise SingularPosterior(f"normal equations are singular: {e}")
    try:
        return GaussianMeasure(mean, 0.5 * (cov + cov.T))
    except NumericalFailure as e:
        raise SingularPosterior(f"normal-equation covariance is unusable: {e}")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def parameter_names(d):
    return [f'beta{j}' for j in range(d)]


def posterior_frame(measure, names=None):
    names = names or parameter_names(measure.d)
    return pd.DataFrame({'param': names, 'mean': measure.mean, 'sd': measure.sd})


def covariance_frame(measure, names=None):
    names = names or parameter_names(measure.d)
    return pd.DataFrame(measure.cov, columns=names)


def export_posterior(measure, path, fmt='csv', names=None):
    """param,mean,sd table plus the d x d covariance (a second CSV, sheet or JSON key)"""
    tables = {'posterior': posterior_frame(measure, names), 'cov': covariance_frame(measure, names)}
    written = export_tables(tables, path, fmt)
    logger.info("posterior written to %s", ', '.join(written))
    return written

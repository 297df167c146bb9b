"""
Verification layer
Subspace-embedding certification, exact Gaussian Wasserstein quantities and
evaluators for the approximation inequalities a sketch is expected to satisfy.
Every evaluator returns a report whose lhs/rhs are computed from exact SVD-based
quantities, so slack is measurable rather than asserted.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from bayes_utils import PriorSpec, augment, posterior
from linalg_utils import (
    as_matrix,
    condition_number,
    ols_solve,
    singular_values,
    spectral_norm,
    sqrtm_psd,
    svd,
    trace_inv_gram,
)
from sketch_utils import SketchMethod, finalize, sketch_dense, target_dimension
from sketchreg_config import get_config
from sketchreg_errors import ContractViolation, NumericalFailure

logger = logging.getLogger(__name__)


def _format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return ','.join(_format_value(v) for v in value)
    return str(value)


def _plain(value):
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class EmbeddingReport:
    deviation: float
    epsilon_target: float
    passed: bool
    singular_ratios: np.ndarray

    def to_dict(self):
        return {'check': 'embedding', 'deviation': float(self.deviation), 'epsilon_target': self.epsilon_target,
                'pass': bool(self.passed), 'singular_ratios': _plain(self.singular_ratios)}

    def to_text(self):
        return '\n'.join(f"{key}={_format_value(value)}" for key, value in self.to_dict().items())


@dataclass
class BoundReport:
    """lhs <= rhs with satisfied <=> lhs <= rhs (1 + bound_rtol) + bound_atol"""
    name: str
    lhs: float
    rhs: float
    satisfied: bool = None
    slack: float = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lhs = float(self.lhs)
        self.rhs = float(self.rhs)
        if self.satisfied is None:
            self.satisfied = bound_holds(self.lhs, self.rhs)
        self.slack = self.rhs - self.lhs

    def to_dict(self):
        out = {'check': self.name, 'lhs': self.lhs, 'rhs': self.rhs, 'satisfied': bool(self.satisfied),
               'slack': self.slack}
        out.update(_plain(self.details))
        return out

    def to_text(self):
        return '\n'.join(f"{key}={_format_value(value)}" for key, value in self.to_dict().items())


def bound_holds(lhs, rhs):
    return lhs <= rhs * (1.0 + get_config('bound_rtol')) + get_config('bound_atol')


# ---------------------------------------------------------------------------
# embedding certification
# ---------------------------------------------------------------------------

def _paired_matrices(M, sketched_M):
    M = as_matrix(M, 'M')
    sketched_M = as_matrix(sketched_M, 'sketched M')
    if M.shape[1] != sketched_M.shape[1]:
        raise ContractViolation(f"M has {M.shape[1]} columns but the sketch has {sketched_M.shape[1]}")
    return M, sketched_M


def _full_rank_svd(M):
    f = svd(M)
    if f.rank < M.shape[1]:
        raise NumericalFailure(f"matrix has rank {f.rank} < {M.shape[1]} columns; its column space is degenerate")
    return f


def _squared_singular_ratios(M_sigma, sketched_M):
    sketched = singular_values(sketched_M)
    padded = np.zeros(len(M_sigma))
    padded[:min(len(sketched), len(M_sigma))] = sketched[:len(M_sigma)]
    return padded ** 2 / M_sigma ** 2


def verify_embedding(M, sketched_M, epsilon):
    """Deviation ||(PiU)^T (PiU) - I||_2 of the sketched orthonormal basis of colspace(M)

    PiU is recovered from the sketch alone as sketched_M V Sigma^-1.
    """
    M, sketched_M = _paired_matrices(M, sketched_M)
    f = _full_rank_svd(M)
    PiU = (sketched_M @ f.V) / f.sigma
    deviation = spectral_norm(PiU.T @ PiU - np.eye(f.rank))
    ratios = _squared_singular_ratios(f.sigma, sketched_M)
    report = EmbeddingReport(deviation, float(epsilon), bool(deviation <= epsilon), ratios)
    logger.debug("embedding deviation %.4g (target %.4g)", deviation, epsilon)
    return report


def check_singular_values(M, sketched_M, epsilon):
    """Two-sided singular value preservation, plus the inverse-square variant with 2 eps slack

    lhs is max_i |sigma_i^2(PiM) / sigma_i^2(M) - 1| against rhs = eps. The
    details record whether (1 - 2eps) <= sigma_i^-2(PiM) / sigma_i^-2(M) <= (1 + 2eps).
    """
    M, sketched_M = _paired_matrices(M, sketched_M)
    f = _full_rank_svd(M)
    ratios = _squared_singular_ratios(f.sigma, sketched_M)
    lhs = float(np.max(np.abs(ratios - 1.0))) if ratios.size else 0.0
    with np.errstate(divide='ignore'):
        inverse = 1.0 / ratios
    inverse_lhs = float(np.max(np.abs(inverse - 1.0))) if inverse.size else 0.0
    return BoundReport('singular_values', lhs, epsilon, details={
        'inverse_square_deviation': inverse_lhs,
        'inverse_square_rhs': 2.0 * epsilon,
        'inverse_square_satisfied': bool(bound_holds(inverse_lhs, 2.0 * epsilon)),
    })


# ---------------------------------------------------------------------------
# Wasserstein distances between Gaussians
# ---------------------------------------------------------------------------

def w2_gaussian(p, q):
    """Exact 2-Wasserstein distance between two Gaussians (Bures form)"""
    if p.d != q.d:
        raise ContractViolation(f"measures have dimensions {p.d} and {q.d}")
    mean_term = float(np.sum((p.mean - q.mean) ** 2))
    root_q = sqrtm_psd(q.cov)
    cross = sqrtm_psd(root_q @ p.cov @ root_q)
    cov_term = float(np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))
    return math.sqrt(max(mean_term + max(cov_term, 0.0), 0.0))


def wasserstein_weight(p):
    """Distance to the point mass at the origin: sqrt(||mean||^2 + trace(cov))"""
    return math.sqrt(float(np.sum(p.mean ** 2)) + max(float(np.trace(p.cov)), 0.0))


# ---------------------------------------------------------------------------
# least-squares and posterior bounds
# ---------------------------------------------------------------------------

def _regression(X, Y):
    X = as_matrix(X, 'X')
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"X has {X.shape[0]} rows but Y has {Y.shape[0]} entries")
    return X, Y


def check_lemma1(X, Y, nu, epsilon):
    """Residual of the sketched solution nu against (1 + eps) times the optimal residual

    The details also report the stronger (1 + eps^2) form that holds for an
    (eps/3)-embedding.
    """
    X, Y = _regression(X, Y)
    gamma = ols_solve(X, Y)
    optimal = float(np.sum((X @ gamma - Y) ** 2))
    lhs = float(np.sum((X @ np.asarray(nu, dtype=np.float64) - Y) ** 2))
    strong_rhs = (1.0 + epsilon * epsilon) * optimal
    return BoundReport('lemma1', lhs, (1.0 + epsilon) * optimal, details={
        'optimal_residual': optimal,
        'strong_rhs': strong_rhs,
        'strong_satisfied': bool(bound_holds(lhs, strong_rhs)),
    })


def check_lemma2(X, Y, nu, epsilon):
    """||gamma - nu||^2 against (eps^2 / sigma_min^2(X)) ||X gamma - Y||^2"""
    X, Y = _regression(X, Y)
    gamma = ols_solve(X, Y)
    s = singular_values(X)
    if s.size < X.shape[1] or s[-1] == 0.0:
        raise NumericalFailure("X does not have full column rank")
    residual = float(np.sum((X @ gamma - Y) ** 2))
    lhs = float(np.sum((gamma - np.asarray(nu, dtype=np.float64)) ** 2))
    return BoundReport('lemma2', lhs, epsilon * epsilon / s[-1] ** 2 * residual,
                       details={'sigma_min': float(s[-1]), 'optimal_residual': residual})


def _system_terms(system, mean):
    Z = as_matrix(system.Z, 'Z')
    s = singular_values(Z)
    if s.size < Z.shape[1] or s[-1] == 0.0:
        raise NumericalFailure("augmented system does not have full column rank")
    residual = float(np.sum((Z @ mean - system.z) ** 2))
    return Z, s, residual, trace_inv_gram(Z)


def _sigma_of(prior, sigma):
    sigma = prior.sigma if sigma is None else sigma
    if isinstance(sigma, str):
        raise ContractViolation("bound checks need a numeric sigma")
    return float(sigma)


def check_lemma3(X, Y, prior, sketched, exact, epsilon, sigma=None):
    """Covariance part alone: W2^2 of the centered pair against eps^2 sigma^2 tr((Z^T Z)^-1)"""
    X, Y = _regression(X, Y)
    sigma = _sigma_of(prior, sigma)
    system = augment(X, Y, prior)
    _, _, _, trace = _system_terms(system, exact.mean)
    lhs = w2_gaussian(exact.centered(), sketched.centered()) ** 2
    return BoundReport('lemma3', lhs, epsilon * epsilon * sigma * sigma * trace, details={'trace_inv_gram': trace})


def check_theorem1(X, Y, prior, sketched, exact, epsilon, sigma=None):
    """W2^2(exact, sketched) against (eps^2/sigma_min^2(Z)) ||Z mu - z||^2 + eps^2 sigma^2 tr((Z^T Z)^-1)

    With a uniform prior Z = X and this is the likelihood bound.
    """
    X, Y = _regression(X, Y)
    sigma = _sigma_of(prior, sigma)
    system = augment(X, Y, prior)
    _, s, residual, trace = _system_terms(system, exact.mean)
    mean_term = epsilon * epsilon / s[-1] ** 2 * residual
    cov_term = epsilon * epsilon * sigma * sigma * trace
    lhs = w2_gaussian(exact, sketched) ** 2
    name = 'theorem1' if prior.is_gaussian else 'lemma4'
    return BoundReport(name, lhs, mean_term + cov_term, details={
        'mean_term': mean_term, 'covariance_term': cov_term, 'sigma_min': float(s[-1]),
    })


def check_lemma4(X, Y, sketched, exact, epsilon, sigma):
    """Likelihood form of the posterior bound (improper uniform prior)"""
    return check_theorem1(X, Y, PriorSpec.uniform(sigma), sketched, exact, epsilon, sigma)


def check_corollary(X, Y, prior, sketched, exact, epsilon, rho=None):
    """W2(sketched) against (1 + kappa(Z) eps / rho) W2(exact)

    rho defaults to the measured rho* = ||Z mu|| / ||z||. When the hypothesis
    ||Z mu|| >= rho ||z|| fails, or rho* is 0, the report is flagged
    inapplicable and counts as satisfied vacuously.
    """
    X, Y = _regression(X, Y)
    system = augment(X, Y, prior)
    Z = as_matrix(system.Z, 'Z')
    fitted = float(np.linalg.norm(Z @ exact.mean))
    target = float(np.linalg.norm(system.z))
    measured_rho = fitted / target if target > 0 else 1.0
    measured_rho = min(measured_rho, 1.0)
    rho = measured_rho if rho is None else float(rho)
    kappa = condition_number(Z)
    lhs = wasserstein_weight(sketched)
    applicable = rho > 0 and fitted >= rho * target * (1.0 - get_config('bound_rtol'))
    details = {'rho': rho, 'measured_rho': measured_rho, 'kappa': kappa, 'applicable': bool(applicable)}
    if not applicable:
        logger.warning("corollary hypothesis ||Z mu|| >= rho ||z|| fails (rho*=%.3g); bound not applicable",
                       measured_rho)
        return BoundReport('corollary', lhs, math.inf, satisfied=True, details=details)
    name = 'corollary2' if prior.is_gaussian else 'corollary1'
    return BoundReport(name, lhs, (1.0 + kappa * epsilon / rho) * wasserstein_weight(exact), details=details)


# ---------------------------------------------------------------------------
# gram instability
# ---------------------------------------------------------------------------

@dataclass
class InstabilityReport:
    kappa_X: float
    kappa_gram: float
    kappa_sketch: float
    k: int
    method: str = 'rad'
    squaring_holds: bool = None

    def __post_init__(self):
        if self.squaring_holds is None and self.kappa_X >= 1e3:
            self.squaring_holds = bool(self.kappa_gram >= self.kappa_X ** 1.9)

    def to_dict(self):
        out = {'check': 'instability'}
        out.update(_plain(asdict(self)))
        return out

    def to_text(self):
        return '\n'.join(f"{key}={_format_value(value)}" for key, value in self.to_dict().items())


def instability_report(X, Y, epsilon=0.1, seed=0, method='rad'):
    """Condition numbers of X, of X^T X and of a sketch Pi X"""
    X, Y = _regression(X, Y)
    data = np.column_stack([X, Y])
    method = SketchMethod.from_name(method)
    k = target_dimension(method, data.shape[1], epsilon)
    PiX = finalize(sketch_dense(method, data, k, seed=seed))[:, :-1]
    gram = X.T @ X
    return InstabilityReport(condition_number(X), condition_number(gram), condition_number(PiX), k,
                             method.name.lower())


# ---------------------------------------------------------------------------
# full verification run
# ---------------------------------------------------------------------------

def verify_all(X, Y, sketch, prior, epsilon, sigma):
    """Embedding certificate plus every bound for one (data, sketch, prior) triple

    epsilon is the bound's accuracy; the embedding is certified at epsilon / 3.
    """
    X, Y = _regression(X, Y)
    sketch = as_matrix(sketch, 'sketch')
    PiX, PiY = sketch[:, :-1], sketch[:, -1]
    reports = [verify_embedding(np.column_stack([X, Y]), sketch, epsilon / 3.0)]
    reports.append(check_singular_values(X, PiX, epsilon))
    nu = ols_solve(PiX, PiY)
    reports.append(check_lemma1(X, Y, nu, epsilon))
    reports.append(check_lemma2(X, Y, nu, epsilon))
    exact = posterior(augment(X, Y, prior), sigma)
    sketched = posterior(augment(PiX, PiY, prior), sigma)
    reports.append(check_lemma3(X, Y, prior, sketched, exact, epsilon, sigma))
    reports.append(check_theorem1(X, Y, prior, sketched, exact, epsilon, sigma))
    reports.append(check_corollary(X, Y, prior, sketched, exact, epsilon))
    return reports


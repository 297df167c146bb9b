"""Tests for embedding certification, Gaussian Wasserstein distances and bound evaluators"""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from bayes_utils import GaussianMeasure, PriorSpec, augment, posterior
from data_utils import SimConfig, simulate
from helpers import random_orthonormal
from linalg_utils import ols_solve
from metrics_utils import (
    BoundReport,
    EmbeddingReport,
    InstabilityReport,
    bound_holds,
    check_corollary,
    check_lemma1,
    check_lemma2,
    check_lemma3,
    check_lemma4,
    check_singular_values,
    check_theorem1,
    instability_report,
    verify_all,
    verify_embedding,
    w2_gaussian,
    wasserstein_weight,
)
from sketch_utils import finalize, sketch_dense, target_dimension
from sketchreg_errors import ContractViolation, NumericalFailure


def _random_gaussian(rng, d):
    A = rng.standard_normal((d, d))
    return GaussianMeasure(rng.standard_normal(d), A @ A.T + 0.1 * np.eye(d))


def _ill_conditioned(rng, n, singular):
    U = random_orthonormal(rng, n, len(singular))
    V = random_orthonormal(rng, len(singular), len(singular))
    return (U * np.asarray(singular)) @ V.T


def _certified_sketch(data, epsilon, seed):
    """SRHT sketch of data sized generously for an (epsilon / 3)-embedding, plus its measured deviation"""
    k = 9 * target_dimension('srht', data.shape[1], epsilon / 3)
    sketch = finalize(sketch_dense('srht', data, k, seed=seed, block_mode=True))
    return sketch, verify_embedding(data, sketch, epsilon / 3)


class TestBoundHolds:
    def test_tolerance_on_zero_rhs(self):
        assert bound_holds(1e-13, 0.0)
        assert not bound_holds(1e-6, 0.0)

    def test_relative_tolerance(self):
        assert bound_holds(1.0 + 1e-10, 1.0)
        assert not bound_holds(1.0 + 1e-6, 1.0)

    def test_report_fields(self):
        report = BoundReport('x', 1.0, 3.0)
        assert report.satisfied
        assert report.slack == 2.0
        assert report.to_dict()['check'] == 'x'


class TestVerifyEmbedding:
    def test_identity_sketch(self, rng):
        M = rng.standard_normal((40, 4))
        report = verify_embedding(M, M, 1e-6)
        assert report.deviation < 1e-12
        assert report.passed
        np.testing.assert_allclose(report.singular_ratios, np.ones(4), rtol=1e-12)

    def test_doubled_sketch(self, rng):
        M = rng.standard_normal((40, 4))
        report = verify_embedding(M, 2.0 * M, 2.9)
        assert report.deviation == pytest.approx(3.0, rel=1e-12)
        assert not report.passed
        assert verify_embedding(M, 2.0 * M, 3.0 + 1e-9).passed

    def test_rank_deficient(self):
        M = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(NumericalFailure):
            verify_embedding(M, M, 0.1)

    def test_column_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            verify_embedding(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)), 0.1)

    def test_short_sketch_pads_ratios(self, rng):
        M = rng.standard_normal((20, 3))
        report = verify_embedding(M, M[:2], 0.5)
        assert report.singular_ratios[-1] == 0.0
        assert not report.passed

    def test_text_format(self, rng):
        M = rng.standard_normal((10, 2))
        text = verify_embedding(M, M, 0.1).to_text()
        assert 'check=embedding' in text.splitlines()
        assert 'pass=true' in text.splitlines()

    def test_singular_values_identity(self, rng):
        M = rng.standard_normal((30, 3))
        report = check_singular_values(M, M, 0.1)
        assert report.lhs < 1e-12
        assert report.details['inverse_square_satisfied']

    def test_singular_values_follow_embedding(self, rng):
        """Both singular-value forms hold whenever the embedding certificate passes"""
        M = rng.standard_normal((512, 3))
        for seed in range(10):
            sketch = finalize(sketch_dense('srht', M, 400, seed=seed))
            cert = verify_embedding(M, sketch, 0.25)
            if cert.passed:
                report = check_singular_values(M, sketch, 0.25)
                assert report.satisfied
                assert report.details['inverse_square_satisfied']


class TestWasserstein:
    def test_same_measure(self, rng):
        p = _random_gaussian(rng, 3)
        assert w2_gaussian(p, p) == pytest.approx(0.0, abs=1e-6)

    def test_shifted_means(self, rng):
        p = _random_gaussian(rng, 3)
        q = GaussianMeasure(p.mean + np.array([3.0, 0.0, 4.0]), p.cov)
        assert w2_gaussian(p, q) == pytest.approx(5.0, rel=1e-9)

    def test_one_dimensional(self):
        assert w2_gaussian(GaussianMeasure([0.0], [[1.0]]), GaussianMeasure([0.0], [[4.0]])) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            w2_gaussian(GaussianMeasure([0.0], [[1.0]]), GaussianMeasure([0.0, 0.0], np.eye(2)))

    def test_weight_of_point_mass(self):
        assert wasserstein_weight(GaussianMeasure.point_mass([0.0, 0.0])) == 0.0

    def test_weight_of_standard_normal(self):
        assert wasserstein_weight(GaussianMeasure(np.zeros(5), np.eye(5))) == pytest.approx(math.sqrt(5))

    def test_weight_matches_quadrature(self):
        mean, sd = 1.5, 0.7
        second_moment, _ = integrate.quad(lambda x: x * x * stats.norm.pdf(x, mean, sd), -np.inf, np.inf)
        weight = wasserstein_weight(GaussianMeasure([mean], [[sd * sd]]))
        assert weight == pytest.approx(math.sqrt(second_moment), abs=1e-3)

    def test_metric_properties(self):
        """Symmetry, triangle inequality, mean/centered split and weight consistency"""
        rng = np.random.default_rng(42)
        for _ in range(100):
            d = int(rng.integers(1, 6))
            p, q, r = (_random_gaussian(rng, d) for _ in range(3))
            pq = w2_gaussian(p, q)
            assert pq == pytest.approx(w2_gaussian(q, p), abs=1e-9)
            assert pq <= w2_gaussian(p, r) + w2_gaussian(r, q) + 1e-9
            centered = w2_gaussian(p.centered(), q.centered())
            assert pq ** 2 == pytest.approx(np.sum((p.mean - q.mean) ** 2) + centered ** 2, abs=1e-9)
            origin = GaussianMeasure.point_mass(np.zeros(d))
            assert wasserstein_weight(p) == pytest.approx(w2_gaussian(p, origin), abs=1e-9)


class TestLeastSquaresBounds:
    def test_lemma1_with_optimal_solution(self, small_regression):
        X, Y = small_regression
        report = check_lemma1(X, Y, ols_solve(X, Y), 0.2)
        assert report.satisfied
        assert report.lhs == pytest.approx(report.rhs / 1.2, rel=1e-12)

    def test_lemma1_exact_fit(self, rng):
        X = rng.standard_normal((20, 3))
        Y = X @ np.array([1.0, 2.0, 3.0])
        report = check_lemma1(X, Y, ols_solve(X, Y), 0.1)
        assert report.lhs < 1e-20
        assert report.satisfied

    def test_lemma1_detects_bad_solution(self, small_regression):
        X, Y = small_regression
        assert not check_lemma1(X, Y, np.zeros(3), 0.1).satisfied

    def test_lemma2_with_optimal_solution(self, small_regression):
        X, Y = small_regression
        report = check_lemma2(X, Y, ols_solve(X, Y), 0.1)
        assert report.lhs == 0.0
        assert report.satisfied

    def test_lemma2_exact_fit(self, rng):
        X = rng.standard_normal((20, 3))
        Y = X @ np.array([1.0, -1.0, 0.5])
        report = check_lemma2(X, Y, ols_solve(X, Y), 0.1)
        assert report.rhs < 1e-20
        assert report.satisfied

    def test_lemma2_rank_deficient(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(NumericalFailure):
            check_lemma2(X, [1.0, 2.0, 3.0], [0.0, 0.0], 0.1)


class TestPosteriorBounds:
    @pytest.fixture
    def problem(self, rng):
        X = rng.standard_normal((200, 3))
        Y = X @ np.array([1.0, 0.0, -1.0]) + rng.standard_normal(200)
        prior = PriorSpec.gaussian(np.zeros(3), 0.5 * np.eye(3), sigma=1.0)
        return X, Y, prior

    def test_identity_sketch(self, problem):
        X, Y, prior = problem
        exact = posterior(augment(X, Y, prior), 1.0)
        report = check_theorem1(X, Y, prior, exact, exact, 0.1)
        assert report.name == 'theorem1'
        assert report.lhs == pytest.approx(0.0, abs=1e-12)
        assert report.satisfied
        assert check_lemma3(X, Y, prior, exact, exact, 0.1).satisfied

    def test_uniform_prior_is_likelihood_bound(self, problem):
        X, Y, _ = problem
        exact = posterior(augment(X, Y, PriorSpec.uniform(1.0)), 1.0)
        report = check_lemma4(X, Y, exact, exact, 0.1, 1.0)
        assert report.name == 'lemma4'
        assert report.satisfied

    def test_needs_numeric_sigma(self, problem):
        X, Y, _ = problem
        prior = PriorSpec.uniform()
        exact = posterior(augment(X, Y, prior), 1.0)
        with pytest.raises(ContractViolation):
            check_theorem1(X, Y, prior, exact, exact, 0.1)

    def test_prior_dominated_instance(self, rng):
        """A huge S pins both posteriors to the unsketched prior block"""
        X = rng.standard_normal((50, 2))
        Y = rng.standard_normal(50)
        prior = PriorSpec.gaussian(np.zeros(2), 1e6 * np.eye(2), sigma=1.0)
        sketch = finalize(sketch_dense('rad', np.column_stack([X, Y]), 20, seed=3))
        exact = posterior(augment(X, Y, prior), 1.0)
        sketched = posterior(augment(sketch[:, :-1], sketch[:, -1], prior), 1.0)
        report = check_theorem1(X, Y, prior, sketched, exact, 0.1)
        assert report.lhs <= 1e-6 * report.rhs

    def test_corollary_identity(self, problem):
        X, Y, prior = problem
        exact = posterior(augment(X, Y, prior), 1.0)
        report = check_corollary(X, Y, prior, exact, exact, 0.1)
        assert report.details['applicable']
        kappa, rho = report.details['kappa'], report.details['rho']
        assert report.lhs == pytest.approx(report.rhs / (1.0 + kappa * 0.1 / rho), rel=1e-12)
        assert report.satisfied
        assert report.name == 'corollary2'

    def test_corollary_inapplicable(self):
        X = np.array([[1.0], [0.0]])
        Y = np.array([0.0, 1.0])
        prior = PriorSpec.uniform(1.0)
        exact = posterior(augment(X, Y, prior), 1.0)
        report = check_corollary(X, Y, prior, exact, exact, 0.1)
        assert not report.details['applicable']
        assert report.rhs == math.inf
        assert report.satisfied


class TestInstability:
    def test_orthonormal_design(self, rng):
        X = random_orthonormal(rng, 100, 3)
        report = instability_report(X, rng.standard_normal(100))
        assert report.kappa_X == pytest.approx(1.0)
        assert report.kappa_gram == pytest.approx(1.0)
        assert report.kappa_sketch < 2.0
        assert report.squaring_holds is None

    def test_diagonal_design(self):
        X = np.zeros((10, 2))
        X[0, 0], X[1, 1] = 1.0, 1e-4
        report = instability_report(X, np.ones(10))
        assert report.kappa_X == pytest.approx(1e4, rel=1e-9)
        assert report.kappa_gram == pytest.approx(1e8, rel=1e-6)
        assert report.squaring_holds
        assert report.k == target_dimension('rad', 3, 0.1)

    def test_report_serialises(self):
        report = InstabilityReport(10.0, 100.0, 11.0, 5)
        payload = report.to_dict()
        assert payload['check'] == 'instability'
        assert payload['squaring_holds'] is None
        assert 'kappa_gram=100.0' in report.to_text()


class TestVerifyAll:
    def test_identity_sketch_satisfies_everything(self, small_regression):
        X, Y = small_regression
        prior = PriorSpec.gaussian(np.zeros(3), np.eye(3), sigma=0.1)
        reports = verify_all(X, Y, np.column_stack([X, Y]), prior, 0.1, 0.1)
        assert isinstance(reports[0], EmbeddingReport)
        assert reports[0].passed
        names = [r.name for r in reports[1:]]
        assert names == ['singular_values', 'lemma1', 'lemma2', 'lemma3', 'theorem1', 'corollary2']
        for report in reports[1:]:
            assert report.satisfied
            assert report.slack == pytest.approx(report.rhs - report.lhs)


@pytest.mark.slow
class TestMonteCarloBounds:
    """Bounds on certified sketches over many seeds"""

    def test_lemma1_on_certified_embeddings(self):
        rng = np.random.default_rng(42)
        epsilon = 0.3
        certified = strong = 0
        for seed in range(100):
            X = rng.standard_normal((2048, 4))
            Y = X @ rng.standard_normal(4) + rng.standard_normal(2048)
            data = np.column_stack([X, Y])
            sketch, cert = _certified_sketch(data, epsilon, seed)
            if not cert.passed:
                continue
            certified += 1
            report = check_lemma1(X, Y, ols_solve(sketch[:, :-1], sketch[:, -1]), epsilon)
            assert report.satisfied
            strong += report.details['strong_satisfied']
        assert certified >= 50
        assert strong >= 0.95 * certified

    @pytest.mark.parametrize('epsilon', [0.1, 0.2])
    def test_lemma2_and_theorem1(self, epsilon):
        rng = np.random.default_rng(42)
        certified = 0
        slacks = []
        for seed in range(100):
            d = 8
            X = rng.standard_normal((4096, d))
            Y = X @ rng.standard_normal(d) + rng.standard_normal(4096)
            A = rng.standard_normal((d, d))
            prior = PriorSpec.gaussian(rng.standard_normal(d), A + d * np.eye(d), sigma=1.0)
            sketch, cert = _certified_sketch(np.column_stack([X, Y]), epsilon, seed)
            if not cert.passed:
                continue
            certified += 1
            PiX, PiY = sketch[:, :-1], sketch[:, -1]
            assert check_lemma2(X, Y, ols_solve(PiX, PiY), epsilon).satisfied
            exact = posterior(augment(X, Y, prior), 1.0)
            sketched = posterior(augment(PiX, PiY, prior), 1.0)
            report = check_theorem1(X, Y, prior, sketched, exact, epsilon)
            assert report.satisfied
            slacks.append(report.slack)
            corollary = check_corollary(X, Y, prior, sketched, exact, epsilon)
            assert corollary.satisfied
        assert certified >= 50
        assert np.median(slacks) > 0

    @pytest.mark.parametrize('epsilon', [0.1, 0.2])
    def test_theorem1_rate_at_target_dimension(self, epsilon):
        """Uncertified SRHT sketches at k = target_dimension(d + 1, eps) meet both posterior bounds in 90% of seeds"""
        rng = np.random.default_rng(42)
        n, d = 4096, 8
        k = target_dimension('srht', d + 1, epsilon)
        theorem_ok = corollary_ok = 0
        slacks = []
        for seed in range(100):
            X = rng.standard_normal((n, d))
            Y = X @ rng.standard_normal(d) + rng.standard_normal(n)
            A = rng.standard_normal((d, d))
            prior = PriorSpec.gaussian(rng.standard_normal(d), A + d * np.eye(d), sigma=1.0)
            sketch = finalize(sketch_dense('srht', np.column_stack([X, Y]), k, seed=seed, block_mode=True))
            PiX, PiY = sketch[:, :-1], sketch[:, -1]
            exact = posterior(augment(X, Y, prior), 1.0)
            sketched = posterior(augment(PiX, PiY, prior), 1.0)
            report = check_theorem1(X, Y, prior, sketched, exact, epsilon)
            theorem_ok += report.satisfied
            slacks.append(report.slack)
            corollary_ok += check_corollary(X, Y, prior, sketched, exact, epsilon).satisfied
        print(f"k={k} eps={epsilon}: theorem1 {theorem_ok}/100, corollary {corollary_ok}/100, "
              f"median slack {np.median(slacks):.4g}")
        assert k < n
        assert theorem_ok >= 90
        assert corollary_ok >= 90
        assert np.median(slacks) > 0

    def test_posterior_mean_distance_grows_with_noise(self):
        """||gamma - nu||^2 is finite, grows with sigma and stays under the coefficient-distance
        bound at three times the measured embedding deviation"""
        n, d = 10_000, 20
        for method in ('rad', 'srht', 'cw'):
            small, large = [], []
            for seed in range(20):
                X, _, beta = simulate(SimConfig(n=n, d=d, sigma=1.0, seed=seed))
                noise = np.random.default_rng(seed).standard_normal(n)
                data = np.column_stack([X, X @ beta, noise])
                if method == 'cw':
                    k = target_dimension('cw', d + 2, 0.1, d_var=d)
                else:
                    k = target_dimension(method, d + 2, 0.1)
                sketch = finalize(sketch_dense(method, data, k, seed=seed, block_mode=True))
                PiX, PiXb, PiE = sketch[:, :d], sketch[:, d], sketch[:, d + 1]
                for sigma, bucket in ((1.0, small), (10.0, large)):
                    Y = X @ beta + sigma * noise
                    nu = ols_solve(PiX, PiXb + sigma * PiE)
                    gamma = ols_solve(X, Y)
                    distance = float(np.sum((gamma - nu) ** 2))
                    assert math.isfinite(distance)
                    bucket.append(distance)
                    deviation = verify_embedding(np.column_stack([X, Y]),
                                                 np.column_stack([PiX, PiXb + sigma * PiE]), 1.0).deviation
                    if 3 * deviation <= 1.0:
                        assert check_lemma2(X, Y, nu, 3 * deviation).satisfied
            assert np.mean(large) > np.mean(small)

    def test_gram_squares_condition_number(self):
        rng = np.random.default_rng(42)
        good = 0
        for seed in range(100):
            X = _ill_conditioned(rng, 200, [1.0, 1e-3, 1e-6])
            report = instability_report(X, rng.standard_normal(200), epsilon=0.1, seed=seed)
            assert report.kappa_gram >= 1e11
            good += report.kappa_sketch <= 2e6
        assert good >= 90

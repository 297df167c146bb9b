"""Tests for priors, augmentation and conjugate posteriors"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from bayes_utils import (
    ESTIMATE,
    AugmentedSystem,
    GaussianMeasure,
    PriorSpec,
    augment,
    estimate_sigma,
    export_posterior,
    fit_posterior,
    posterior,
    posterior_from_data,
    posterior_from_gram,
    posterior_from_sketch,
)
from data_utils import SimConfig, simulate
from helpers import random_orthonormal
from linalg_utils import ols_solve
from sketch_utils import finalize, gram_sketch, sketch_dense, target_dimension
from sketchreg_errors import ContractViolation, NumericalFailure, SingularPosterior


def _random_spd_root(rng, d):
    A = rng.standard_normal((d, d))
    return A + d * np.eye(d)


class TestPriorSpec:
    def test_uniform_defaults_to_estimate(self):
        prior = PriorSpec.uniform()
        assert not prior.is_gaussian
        assert prior.sigma == ESTIMATE
        assert prior.m is None and prior.S is None

    def test_gaussian_must_be_full_rank(self):
        with pytest.raises(ContractViolation):
            PriorSpec.gaussian([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])

    def test_gaussian_mean_length(self):
        with pytest.raises(ContractViolation):
            PriorSpec.gaussian([0.0], np.eye(2))

    def test_s_must_be_square(self):
        with pytest.raises(ContractViolation):
            PriorSpec.gaussian([0.0, 0.0], np.ones((3, 2)))

    @pytest.mark.parametrize('sigma', [0.0, -1.0, float('inf'), 'guess'])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ContractViolation):
            PriorSpec.uniform(sigma)

    def test_uniform_is_not_a_measure(self):
        with pytest.raises(ContractViolation):
            PriorSpec.uniform(1.0).measure(1.0)

    def test_gaussian_measure_covariance(self):
        S = np.diag([2.0, 4.0])
        measure = PriorSpec.gaussian([1.0, -1.0], S).measure(3.0)
        np.testing.assert_allclose(measure.mean, [1.0, -1.0])
        np.testing.assert_allclose(measure.cov, 9.0 * np.diag([0.25, 0.0625]), rtol=1e-12)


class TestGaussianMeasure:
    def test_point_mass(self):
        p = GaussianMeasure.point_mass([1.0, 2.0])
        np.testing.assert_array_equal(p.cov, np.zeros((2, 2)))
        np.testing.assert_array_equal(p.sd, [0.0, 0.0])

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(NumericalFailure):
            GaussianMeasure([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])

    def test_indefinite_covariance_rejected(self):
        with pytest.raises(NumericalFailure):
            GaussianMeasure([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            GaussianMeasure([0.0, 0.0], np.eye(3))

    def test_centered(self):
        p = GaussianMeasure([3.0], [[2.0]])
        np.testing.assert_array_equal(p.centered().mean, [0.0])
        np.testing.assert_array_equal(p.centered().cov, [[2.0]])


class TestAugment:
    def test_uniform_passes_through(self, small_regression):
        X, Y = small_regression
        system = augment(X, Y, PriorSpec.uniform())
        np.testing.assert_array_equal(system.Z, X)
        np.testing.assert_array_equal(system.z, Y)
        assert system.prior_rows == 0

    def test_identity_prior_appends_rows(self):
        X = np.array([[1.0, 2.0]])
        system = augment(X, [3.0], PriorSpec.gaussian([0.0, 0.0], np.eye(2)))
        np.testing.assert_array_equal(system.Z, [[1.0, 2.0], [1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(system.z, [3.0, 0.0, 0.0])
        assert system.data_rows == 1

    def test_bottom_rows_are_prior_block(self, rng):
        S = _random_spd_root(rng, 3)
        m = rng.standard_normal(3)
        system = augment(rng.standard_normal((7, 3)), rng.standard_normal(7), PriorSpec.gaussian(m, S))
        np.testing.assert_array_equal(system.Z[-3:], S)
        np.testing.assert_array_equal(system.z[-3:], S @ m)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            augment(rng.standard_normal((5, 3)), rng.standard_normal(5), PriorSpec.gaussian(np.zeros(2), np.eye(2)))
        with pytest.raises(ContractViolation):
            augment(rng.standard_normal((5, 2)), rng.standard_normal(4), PriorSpec.uniform())


class TestPosterior:
    def test_uniform_prior_is_ols(self, small_regression):
        X, Y = small_regression
        post = posterior_from_data(X, Y, PriorSpec.uniform(), sigma=0.5)
        q, r = np.linalg.qr(X)
        np.testing.assert_allclose(post.mean, np.linalg.solve(r, q.T @ Y), rtol=1e-10)
        np.testing.assert_allclose(post.cov, 0.25 * np.linalg.inv(X.T @ X), rtol=1e-9)

    def test_ridge_identity(self, small_regression):
        """S = sqrt(lambda) I, m = 0 gives the ridge estimate"""
        X, Y = small_regression
        lam = 2.5
        prior = PriorSpec.gaussian(np.zeros(3), math.sqrt(lam) * np.eye(3), sigma=1.0)
        post = posterior_from_data(X, Y, prior)
        ridge = np.linalg.solve(X.T @ X + lam * np.eye(3), X.T @ Y)
        np.testing.assert_allclose(post.mean, ridge, rtol=1e-10)

    def test_prior_recovered_without_data(self, rng):
        S = _random_spd_root(rng, 3)
        m = rng.standard_normal(3)
        post = posterior(augment(np.zeros((0, 3)), np.zeros(0), PriorSpec.gaussian(m, S)), 2.0)
        np.testing.assert_allclose(post.mean, m, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(post.cov, 4.0 * np.linalg.inv(S.T @ S), rtol=1e-9)

    def test_covariance_positive_definite(self, sim_data):
        X, Y, _ = sim_data
        post = posterior_from_data(X, Y, PriorSpec.uniform(), sigma=1.0)
        assert np.all(np.linalg.eigvalsh(post.cov) > 0)

    def test_rank_deficient_uniform(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(SingularPosterior):
            posterior_from_data(X, [1.0, 2.0, 3.0], PriorSpec.uniform(), sigma=1.0)

    def test_ill_conditioned_full_rank_accepted(self, rng):
        """kappa = 1e11 is above the rank cut, so the posterior is built rather than rejected"""
        U = random_orthonormal(rng, 50, 3)
        V = random_orthonormal(rng, 3, 3)
        X = (U * np.array([1.0, 1e-5, 1e-11])) @ V.T
        Y = rng.standard_normal(50)
        post = posterior_from_data(X, Y, PriorSpec.uniform(), sigma=1.0)
        assert np.all(np.isfinite(post.mean))
        assert np.all(post.sd > 0)
        np.testing.assert_allclose(post.mean, ols_solve(X, Y), rtol=1e-10)

    def test_prior_rescues_rank_deficiency(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        post = posterior_from_data(X, [1.0, 2.0, 3.0], PriorSpec.gaussian([0.0, 0.0], np.eye(2)), sigma=1.0)
        assert post.is_positive_definite()

    def test_needs_numeric_sigma(self, small_regression):
        X, Y = small_regression
        with pytest.raises(ContractViolation):
            posterior(AugmentedSystem(X, Y), ESTIMATE)

    def test_prior_block_never_sketched(self, rng):
        """Posterior on (PiX, PiY) equals the posterior on the block-diagonal transform of [X; S]"""
        X = rng.standard_normal((64, 3))
        Y = rng.standard_normal(64)
        prior = PriorSpec.gaussian(rng.standard_normal(3), _random_spd_root(rng, 3), sigma=1.0)
        Pi = rng.standard_normal((10, 64))
        direct = posterior_from_data(Pi @ X, Pi @ Y, prior)
        P = np.block([[Pi, np.zeros((10, 3))], [np.zeros((3, 64)), np.eye(3)]])
        Z = np.vstack([X, prior.S])
        z = np.concatenate([Y, prior.S @ prior.m])
        manual = posterior(AugmentedSystem(P @ Z, P @ z), 1.0)
        np.testing.assert_allclose(direct.mean, manual.mean, rtol=1e-10)
        np.testing.assert_allclose(direct.cov, manual.cov, rtol=1e-10)


class TestEstimateSigma:
    def test_perfect_fit(self):
        X = np.eye(2)
        assert estimate_sigma(X, [1.0, 2.0], [1.0, 2.0], 10) == 0.0

    def test_three_four_five(self):
        X = np.eye(2)
        assert estimate_sigma(X, [0.0, 0.0], [3.0, 4.0], 25) == pytest.approx(1.0)

    def test_zero_rows(self):
        with pytest.raises(ContractViolation):
            estimate_sigma(np.eye(2), [0.0, 0.0], [0.0, 0.0], 0)

    def test_fit_posterior_uses_estimate(self, small_regression):
        X, Y = small_regression
        measure, sigma = fit_posterior(X, Y, PriorSpec.uniform(), n=60)
        assert sigma == pytest.approx(estimate_sigma(X, Y, ols_solve(X, Y), 60))
        np.testing.assert_allclose(measure.mean, ols_solve(X, Y), rtol=1e-10)

    def test_fit_posterior_needs_n(self, small_regression):
        X, Y = small_regression
        with pytest.raises(ContractViolation):
            fit_posterior(X, Y, PriorSpec.uniform())

    def test_exact_fit_cannot_estimate(self):
        X = np.eye(2)
        with pytest.raises(NumericalFailure):
            fit_posterior(X, [1.0, 2.0], PriorSpec.uniform(), n=2)

    def test_explicit_sigma_wins(self, small_regression):
        X, Y = small_regression
        _, sigma = fit_posterior(X, Y, PriorSpec.uniform(), sigma=0.7)
        assert sigma == 0.7


class TestPosteriorFromGram:
    def test_matches_svd_path_when_well_conditioned(self, small_regression):
        X, Y = small_regression
        gram = gram_sketch(np.column_stack([X, Y]))
        prior = PriorSpec.gaussian(np.ones(3), np.eye(3), sigma=0.3)
        via_gram = posterior_from_gram(gram, prior, None)
        via_svd = posterior_from_data(X, Y, prior)
        np.testing.assert_allclose(via_gram.mean, via_svd.mean, rtol=1e-8)
        np.testing.assert_allclose(via_gram.cov, via_svd.cov, rtol=1e-8)

    def test_needs_sigma(self, small_regression):
        X, Y = small_regression
        with pytest.raises(ContractViolation):
            posterior_from_gram(gram_sketch(np.column_stack([X, Y])), PriorSpec.uniform(), None)

    def test_singular(self):
        gram = gram_sketch(np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0]]))
        with pytest.raises(SingularPosterior):
            posterior_from_gram(gram, PriorSpec.uniform(), 1.0)

    def test_shape(self):
        with pytest.raises(ContractViolation):
            posterior_from_gram(np.eye(3), PriorSpec.uniform(), 1.0)


class TestPosteriorFromSketch:
    def test_identity_like_cw_sketch(self, small_regression):
        """With far more buckets than rows most rows sit alone, and the estimate is reproducible"""
        X, Y = small_regression
        sketch = finalize(sketch_dense('cw', np.column_stack([X, Y]), 4096, seed=1))
        measure, sigma = posterior_from_sketch(sketch, PriorSpec.uniform(), n=60)
        again, sigma_again = posterior_from_sketch(sketch, PriorSpec.uniform(), n=60)
        assert sigma == sigma_again
        np.testing.assert_array_equal(measure.mean, again.mean)
        np.testing.assert_allclose(measure.mean, [1.0, -2.0, 0.5], atol=0.1)


class TestExportPosterior:
    @pytest.fixture
    def measure(self):
        return GaussianMeasure([1.0, -2.0], [[4.0, 1.0], [1.0, 9.0]])

    def test_csv(self, measure, tmp_path):
        path = str(tmp_path / 'post.csv')
        written = export_posterior(measure, path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ['param', 'mean', 'sd']
        np.testing.assert_allclose(frame['sd'], [2.0, 3.0])
        cov = pd.read_csv(written[1]).to_numpy()
        np.testing.assert_array_equal(cov, [[4.0, 1.0], [1.0, 9.0]])

    def test_xlsx(self, measure, tmp_path):
        path = str(tmp_path / 'post.xlsx')
        export_posterior(measure, path, fmt='xlsx')
        sheets = pd.read_excel(path, sheet_name=None, engine='openpyxl')
        assert sheets['posterior']['param'].tolist() == ['beta0', 'beta1']

    def test_json_with_names(self, measure, tmp_path):
        path = str(tmp_path / 'post.json')
        export_posterior(measure, path, fmt='json', names=['intercept', 'slope'])
        with open(path) as f:
            payload = json.load(f)
        assert [row['param'] for row in payload['posterior']] == ['intercept', 'slope']


@pytest.mark.slow
class TestSigmaRecovery:
    """Plug-in noise estimate on SRHT sketches of simulated data"""

    def test_within_ten_percent(self):
        k = target_dimension('srht', 6, 0.1)
        for seed in range(20):
            X, Y, _ = simulate(SimConfig(n=10_000, d=5, sigma=2.0, seed=seed))
            sketch = finalize(sketch_dense('srht', np.column_stack([X, Y]), k, seed=seed, block_mode=True))
            _, sigma = posterior_from_sketch(sketch, PriorSpec.uniform(), n=10_000)
            assert abs(sigma - 2.0) < 0.2

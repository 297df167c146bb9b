"""Shared fixtures for the SketchReg test suites"""

import numpy as np
import pytest

from data_utils import SimConfig, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_regression(rng):
    """60 x 3 design with a known coefficient vector and light noise"""
    X = rng.normal(size=(60, 3))
    beta = np.array([1.0, -2.0, 0.5])
    Y = X @ beta + 0.1 * rng.normal(size=60)
    return X, Y


@pytest.fixture
def sim_data():
    """Small dataset from the synthetic generator"""
    return simulate(SimConfig(n=500, d=4, sigma=1.0, seed=7))


@pytest.fixture
def data_dir(tmp_path):
    path = tmp_path / 'data'
    path.mkdir()
    return path

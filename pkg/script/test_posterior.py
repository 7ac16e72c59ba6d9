#!/usr/bin/env python3
"""
Tests for the likelihood, the posterior potential and importance-weighted summaries
Run with: pytest script/test_posterior.py
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import gamma

from cnnldp.artifacts import write_tensor_csv
from cnnldp.errors import ConfigError, ShapeMismatchError
from cnnldp.experiments import preset
from cnnldp.gauss import PsdMatrix, RngStream
from cnnldp.ldp import EventSpec
from cnnldp.posterior import (Observations, laziness_profile, log_likelihood, posterior_expectation,
                              posterior_weights, psi, psi_many)


def scalar_obs(y=2.0, beta=1.0):
    return Observations([[[y]]], beta)


def random_psd(rng, dim):
    b = rng.standard_normal((dim, int(rng.integers(1, dim + 1))))
    return b @ b.T


def test_likelihood_at_observations():
    obs = Observations(np.ones((2, 3, 1)), 2.0)
    assert log_likelihood(obs, np.ones((2, 3, 1))) == pytest.approx(3.0 * math.log(2.0 / (2 * math.pi)))


def test_likelihood_scalar():
    assert log_likelihood(scalar_obs(0.0), [[[2.0]]]) == pytest.approx(-0.5 * math.log(2 * math.pi) - 2.0)


def test_likelihood_shape():
    with pytest.raises(ShapeMismatchError):
        log_likelihood(scalar_obs(), np.zeros((1, 2, 1)))


def test_psi_zero_kernel():
    obs = Observations(np.arange(6, dtype=float).reshape(2, 3, 1), 0.5)
    assert psi(np.zeros((3, 3)), obs) == pytest.approx(0.5 * float(np.sum(obs.values ** 2)))


def test_psi_scalar_closed_form():
    assert abs(psi([[1.0]], scalar_obs()) - (2.0 + math.log(2.0))) <= 1e-12


def test_psi_kronecker_blocks():
    rng = np.random.default_rng(1)
    k = random_psd(rng, 4)
    y = rng.standard_normal((1, 4, 1))
    single = psi(k, Observations(y, 0.7))
    double = psi(k, Observations(np.concatenate([y, y]), 0.7))
    assert abs(double - 2 * single) <= 1e-10 * max(1.0, abs(double))


def test_psi_matches_cholesky_reference():
    rng = np.random.default_rng(2)
    k = random_psd(rng, 5)
    y = rng.standard_normal((3, 5, 1))
    beta = 1.3
    a = np.eye(5) + beta * k
    factor = cho_factor(a)
    blocks = y.reshape(3, 5)
    expected = beta * sum(b @ cho_solve(factor, b) for b in blocks) + 3 * np.linalg.slogdet(a)[1]
    assert psi(PsdMatrix(k), Observations(y, beta)) == pytest.approx(expected, rel=1e-10)


def test_psi_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        dim = int(rng.integers(1, 6))
        obs = Observations(rng.standard_normal((int(rng.integers(1, 3)), dim, 1)), float(rng.uniform(0.1, 5)))
        assert psi(random_psd(rng, dim), obs) >= 0.0


def test_psi_vanishes_with_beta():
    assert psi([[1.0]], scalar_obs(beta=1e-12)) < 1e-9


def test_psi_many_agrees_with_psi():
    rng = np.random.default_rng(4)
    stack = np.stack([random_psd(rng, 3) for _ in range(10)])
    obs = Observations(rng.standard_normal((2, 3, 1)), 1.0)
    assert_allclose(psi_many(stack, obs), [psi(k, obs) for k in stack], rtol=1e-12)


def test_psi_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        psi(np.eye(2), scalar_obs())


def test_equal_kernels_give_uniform_weights():
    w = posterior_weights(np.stack([np.eye(2)] * 4), Observations(np.ones((1, 2, 1)), 1.0))
    assert_allclose(w, 0.25)


def test_weights_sum_to_one():
    rng = np.random.default_rng(5)
    stack = np.stack([random_psd(rng, 2) for _ in range(50)])
    w = posterior_weights(stack, Observations(3 * np.ones((1, 2, 1)), 1.0))
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w > 0)


def test_expectation_of_constant_is_exact():
    rng = np.random.default_rng(6)
    stack = np.stack([random_psd(rng, 2) for _ in range(7)])
    w = rng.dirichlet(np.ones(7))
    summary = posterior_expectation(lambda k: 0.1, stack, w)
    assert summary.estimate == 0.1


def test_expectation_uniform_is_mean():
    stack = np.stack([np.eye(2) * s for s in (1.0, 2.0, 6.0)])
    summary = posterior_expectation(np.trace, stack, np.full(3, 1 / 3))
    assert summary.estimate == pytest.approx(6.0)
    assert summary.ess == pytest.approx(3.0)
    assert summary.samples == 3


def test_observations_validation():
    with pytest.raises(ShapeMismatchError):
        Observations(np.ones((2, 2)), 1.0)
    with pytest.raises(ValueError):
        Observations(np.ones((1, 1, 1)), 0.0)


def test_observations_from_csv(tmp_path):
    values = np.arange(12, dtype=float).reshape(2, 3, 2)
    write_tensor_csv(tmp_path / "y.csv", values)
    obs = Observations.from_csv(tmp_path / "y.csv", 2.0)
    assert_allclose(obs.values, values)
    assert obs.beta == 2.0


def test_observations_from_incomplete_csv(tmp_path):
    (tmp_path / "y.csv").write_text("c,i,mu,value\n1,1,1,0.5\n1,2,2,0.5\n")
    with pytest.raises(ConfigError):
        Observations.from_csv(tmp_path / "y.csv", 1.0)


def test_laziness_ratio_shrinks():
    spec = preset("fcnn-scalar-identity").arch
    event = EventSpec(level=2, statistic="frobenius", threshold=1.0)
    table = laziness_profile(spec, PsdMatrix([[1.0]]), scalar_obs(), event, [64, 256, 1024], 2000,
                             RngStream(7))
    ratios = table["log_ratio_per_n"].to_numpy()
    assert np.all(np.isfinite(ratios))
    assert np.all(np.diff(ratios) < 0)
    assert np.all(ratios <= table["bound"].to_numpy())
    assert np.all(table["posterior_prob"] > table["prior_prob"])


def test_expectation_matches_quadrature():
    # K = chi-square(10) / 10, so the prior density is Gamma(5, scale 0.2)
    dof, y = 10, 2.0
    draws = np.random.default_rng(8).chisquare(dof, 50_000) / dof
    stack = draws.reshape(-1, 1, 1)
    obs = scalar_obs(y)
    summary = posterior_expectation(lambda k: k[0, 0], stack, posterior_weights(stack, obs))

    def unnormalized(k):
        return math.exp(-0.5 * (y ** 2 / (1 + k) + math.log(1 + k))) * gamma.pdf(k, dof / 2, scale=2 / dof)

    numerator, _ = integrate.quad(lambda k: k * unnormalized(k), 0, np.inf)
    denominator, _ = integrate.quad(unnormalized, 0, np.inf)
    assert summary.estimate == pytest.approx(numerator / denominator, abs=0.01)
    assert summary.ess > 0.5 * summary.samples


def test_observations_must_match_output_channels():
    spec = preset("fcnn-scalar-identity").arch
    scalar_obs().check(spec)
    with pytest.raises(ShapeMismatchError, match="output channels"):
        Observations(np.ones((2, 1, 1)), 1.0).check(spec)
    with pytest.raises(ShapeMismatchError):
        Observations(np.ones((1, 2, 1)), 1.0).check(spec)

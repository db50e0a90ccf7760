import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import poisson

from mvplnmix.matnorm import MatNormParams
from mvplnmix.mvpln import (
    laplace_batch,
    latent_log_posterior,
    latent_log_posterior_grad,
    latent_neg_hessian,
    mc_prior_log_likelihood,
    mvpln_moments,
    unit_log_likelihood,
)
from mvplnmix.simgen import random_spd

from oracles import central_difference, ghq_log_marginal, poisson_lognormal_moments

LOG_2PI = math.log(2 * math.pi)
UNIT = MatNormParams([[0.0]], [[1.0]], [[1.0]])


def _scalar(mu, s2):
    return MatNormParams([[mu]], [[s2]], [[1.0]])


def test_log_posterior_examples():
    assert latent_log_posterior([[0.0]], [[0]], None, UNIT) == pytest.approx(-1 - 0.5 * LOG_2PI, abs=1e-12)
    l2 = math.log(2)
    expected = 2 * l2 - 2 - 0.5 * LOG_2PI - 0.5 * l2**2
    assert latent_log_posterior([[l2]], [[2]], None, UNIT) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-1.77287, abs=1e-5)


def test_gradient_example():
    assert latent_log_posterior_grad([[0.0]], [[2]], None, UNIT)[0, 0] == pytest.approx(1.0)


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    params = MatNormParams(rng.normal(1, 1, size=(2, 3)), random_spd(2, (0.3, 2), rng), random_spd(3, (0.3, 2), rng))
    s = rng.uniform(0.5, 2, size=6)
    Y = rng.poisson(4, size=(2, 3))
    theta = params.M + 0.3 * rng.normal(size=(2, 3))
    g = latent_log_posterior_grad(theta, Y, s, params)
    fd = central_difference(lambda t: latent_log_posterior(t, Y, s, params), theta, h=1e-5)
    assert np.max(np.abs(g - fd) / (1 + np.abs(g))) < 1e-5


def test_neg_hessian_positive_definite():
    rng = np.random.default_rng(11)
    for _ in range(100):
        params = MatNormParams(rng.normal(size=(2, 3)), random_spd(2, (0.2, 3), rng), random_spd(3, (0.2, 3), rng))
        theta = rng.normal(0, 3, size=(2, 3))
        H = latent_neg_hessian(theta, None, params)
        np.testing.assert_allclose(H, H.T, atol=1e-10)
        assert np.min(np.linalg.eigvalsh(H)) > 0


def test_neg_hessian_matches_finite_difference_of_gradient():
    rng = np.random.default_rng(12)
    params = MatNormParams(rng.normal(size=(2, 2)), random_spd(2, (0.5, 2), rng), random_spd(2, (0.5, 2), rng))
    s = np.array([0.8, 1.2, 1.0, 1.1])
    Y = np.array([[3, 1], [0, 7]])
    theta = params.M.copy()
    h = 1e-6
    cols = []
    for c in range(4):
        e = np.zeros(4)
        e[c] = h
        up = latent_log_posterior_grad(theta + e.reshape(2, 2), Y, s, params).reshape(-1)
        dn = latent_log_posterior_grad(theta - e.reshape(2, 2), Y, s, params).reshape(-1)
        cols.append(-(up - dn) / (2 * h))
    np.testing.assert_allclose(latent_neg_hessian(theta, s, params), np.array(cols).T, atol=1e-6)


def test_laplace_against_quadrature():
    exact = ghq_log_marginal(3, 1.0, 0.25)
    assert abs(unit_log_likelihood([[3]], None, _scalar(1.0, 0.25)) - exact) < 1e-2


def test_point_mass_limit():
    value = unit_log_likelihood([[4]], None, _scalar(1.2, 1e-8))
    assert abs(value - poisson.logpmf(4, math.exp(1.2))) < 1e-4


def test_laplace_against_prior_monte_carlo():
    rng = np.random.default_rng(13)
    # Laplace bias grows with the latent variance; at variances near 0.01 it
    # sits well inside the Monte Carlo error at 1e6 draws
    params = MatNormParams(
        [[1.5, 2.0], [1.0, 2.5]], [[1.0, 0.3], [0.3, 0.8]], [[0.01, 0.002], [0.002, 0.008]]
    )
    Y = np.array([[5, 8], [2, 13]])
    lap = unit_log_likelihood(Y, None, params)
    est, se = mc_prior_log_likelihood(Y, None, params, 1_000_000, rng)
    assert abs(lap - est) < 3 * se


def test_library_sizes_shift_the_mean():
    rng = np.random.default_rng(14)
    params = MatNormParams(rng.normal(1, 0.5, size=(2, 3)), random_spd(2, (0.3, 1), rng), random_spd(3, (0.3, 1), rng))
    s = rng.uniform(0.5, 2, size=6)
    Y = rng.poisson(3, size=(2, 3))
    shifted = MatNormParams(params.M + np.log(s).reshape(2, 3), params.Phi, params.Omega)
    assert unit_log_likelihood(Y, s, params) == pytest.approx(unit_log_likelihood(Y, None, shifted), abs=1e-9)


def test_laplace_pmf_sums_to_one():
    params = _scalar(1.0, 0.5)
    total = sum(math.exp(unit_log_likelihood([[y]], None, params)) for y in range(201))
    assert abs(total - 1.0) < 1e-3


def test_laplace_batch_modes_are_stationary():
    rng = np.random.default_rng(15)
    params = MatNormParams(rng.normal(2, 1, size=(2, 3)), random_spd(2, (0.3, 2), rng), random_spd(3, (0.3, 2), rng))
    Y = rng.poisson(np.exp(params.M), size=(50, 2, 3)).reshape(50, 6)
    res = laplace_batch(Y, np.zeros(6), np.tile(params.M.reshape(-1), (50, 1)), params.precision(), params.logdet_sigma())
    for b in range(50):
        g = latent_log_posterior_grad(res.mode[b].reshape(2, 3), Y[b].reshape(2, 3), None, params)
        assert np.max(np.abs(g)) < 1e-6
    single = unit_log_likelihood(Y[7].reshape(2, 3), None, params)
    assert res.loglik[7] == pytest.approx(single, abs=1e-9)


def test_laplace_large_counts():
    value = unit_log_likelihood([[5000]], None, _scalar(8.0, 0.5))
    assert abs(value - ghq_log_marginal(5000, 8.0, 0.5)) < 1e-2


def test_moment_example():
    mom = mvpln_moments(UNIT)
    assert mom.mean[0, 0] == pytest.approx(math.exp(0.5))
    assert mom.variance[0, 0] == pytest.approx(math.exp(0.5) + math.e * (math.e - 1), rel=1e-12)
    assert mom.variance[0, 0] == pytest.approx(6.31950, abs=1e-5)


def test_moment_poisson_limit():
    mom = mvpln_moments(_scalar(1.0, 1e-12))
    assert mom.variance[0, 0] == pytest.approx(mom.mean[0, 0], rel=1e-9)


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_overdispersion(seed):
    rng = np.random.default_rng(seed)
    params = MatNormParams(rng.normal(size=(2, 3)), random_spd(2, (0.05, 3), rng), random_spd(3, (0.05, 3), rng))
    mom = mvpln_moments(params)
    assert np.all(mom.variance > mom.mean)


def test_moments_agree_with_raw_moment_oracle():
    rng = np.random.default_rng(16)
    params = MatNormParams(rng.normal(size=(2, 3)), random_spd(2, (0.1, 2), rng), random_spd(3, (0.1, 2), rng))
    mean, var, _ = poisson_lognormal_moments(params.M, np.outer(np.diag(params.Phi), np.diag(params.Omega)))
    mom = mvpln_moments(params)
    np.testing.assert_allclose(mom.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(mom.variance, var, rtol=1e-9)

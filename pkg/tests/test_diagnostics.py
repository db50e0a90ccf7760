import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvplnmix.diagnostics import (
    check_chains,
    cramer_von_mises_cdf,
    cvm_critical_value,
    ess,
    heidelberger_welch,
    psrf,
)


def _ar1(rng, phi, n, m=1):
    x = np.empty((m, n))
    x[:, 0] = rng.standard_normal(m) / np.sqrt(1 - phi**2)
    e = rng.standard_normal((m, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    return x


def test_psrf_examples():
    assert psrf(np.full((3, 50), 2.5)) == 1.0
    rng = np.random.default_rng(1)
    assert 0.99 <= psrf(rng.standard_normal((3, 2000))) <= 1.05
    sep = np.stack([rng.standard_normal(1000), 10 + rng.standard_normal(1000)])
    assert psrf(sep) > 1.1


def test_ess_examples():
    rng = np.random.default_rng(2)
    assert ess(rng.standard_normal((3, 2000))) >= 3000
    assert ess(np.ones((3, 40))) == 120
    n = 20_000
    value = ess(_ar1(rng, 0.9, n))
    assert n / 19 / 2 <= value <= 2 * n / 19


def test_ess_bounded_by_cap():
    rng = np.random.default_rng(3)
    # anticorrelated draws can look super-efficient; the estimate is capped
    x = _ar1(rng, -0.8, 2000, m=3)
    assert ess(x) <= 1.25 * 6000 + 1e-9


@given(st.floats(-5, 5).filter(lambda a: abs(a) > 0.1), st.floats(-100, 100), st.integers(0, 2**31))
@settings(max_examples=30)
def test_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 200)) + np.array([[0.0], [0.3], [-0.2]])
    assert psrf(a * x + b) == pytest.approx(psrf(x), rel=1e-9)
    assert ess(a * x + b) == pytest.approx(ess(x), rel=1e-9)
    t = np.cumsum(rng.standard_normal(100)) * 0.1 + rng.standard_normal(100)
    h0, h1 = heidelberger_welch(t), heidelberger_welch(a * t + b)
    assert h1.cvm_statistic == pytest.approx(h0.cvm_statistic, abs=1e-9)
    assert h0.passed == h1.passed


def test_psrf_permutation_invariance():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 500)) + np.array([[0.0], [0.2], [0.1]])
    y = np.stack([rng.permutation(row) for row in x])
    assert psrf(y) == pytest.approx(psrf(x), rel=1e-12)


def test_vector_valued_chains():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 400, 4))
    r, e = psrf(x), ess(x)
    assert r.shape == (4,) and e.shape == (4,)


def test_check_chains():
    rng = np.random.default_rng(6)
    assert check_chains(rng.standard_normal((3, 2000, 2))).passed
    assert not check_chains(rng.standard_normal((3, 20, 2))).passed
    disjoint = rng.standard_normal((3, 2000, 1)) + np.array([0.0, 10.0, 20.0])[:, None, None]
    diag = check_chains(disjoint)
    assert not diag.passed and np.max(diag.psrf) > 1.1


def test_cvm_distribution():
    assert cvm_critical_value(0.05) == pytest.approx(0.46136, abs=1e-4)
    assert cramer_von_mises_cdf(0.46136) == pytest.approx(0.95, abs=1e-4)
    assert cramer_von_mises_cdf(0.0) == 0.0
    assert cramer_von_mises_cdf(0.347) == pytest.approx(0.90, abs=1e-3)
    assert cramer_von_mises_cdf(0.743) == pytest.approx(0.99, abs=1e-3)
    grid = [cramer_von_mises_cdf(q) for q in np.linspace(0.02, 20, 200)]
    assert np.all(np.diff(grid) >= -1e-10)
    assert grid[-1] == pytest.approx(1.0, abs=1e-10)


def test_hw_examples():
    rng = np.random.default_rng(7)
    assert heidelberger_welch(rng.standard_normal(500)).passed
    trend = heidelberger_welch(np.arange(1, 501) / 500)
    assert not trend.passed
    const = heidelberger_welch(np.full(30, 4.0))
    assert const.passed and const.cvm_statistic == 0.0


def test_hw_prefix_dropping():
    rng = np.random.default_rng(8)
    # a burn-in transient followed by stationary noise passes after dropping
    x = np.concatenate([np.linspace(30, 0, 40), rng.standard_normal(360)])
    res = heidelberger_welch(x)
    assert res.passed and res.discarded_prefix_fraction > 0


def test_hw_short_series():
    res = heidelberger_welch(np.arange(5.0))
    assert not res.passed and res.too_short


def test_hw_type_one_error():
    rng = np.random.default_rng(9)
    rejections = sum(not heidelberger_welch(rng.standard_normal(200)).passed for _ in range(200))
    # the prefix schedule runs up to six tests, so the rate can exceed alpha a little
    assert rejections / 200 <= 0.12

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from firstarrival.distributions import (GevParams, binomial_cloglog_loglik_grad, cloglog_prob, count_loglik_grad,
                                        date_to_z, gev_cdf, gev_logpdf, gev_logpdf_grad, gev_median,
                                        gev_quantile, poisson_loglik_grad, z_to_day)

# high-precision reference values (30-digit evaluation of the closed forms)
ORACLE = [
    # z, mu, sigma, xi, cdf, logpdf
    (1.3, 1.0, 0.5, -0.3, 0.596858612384582034, -0.285980033610486632),
    (0.2, 0.0, 2.0, 0.4, None, -1.737021632671614905),
    (1.4, 0.0, 2.0, 0.0, None, -1.889732484351354824),
]


@pytest.mark.parametrize("z,mu,sigma,xi,cdf,lp", ORACLE)
def test_gev_against_reference(z, mu, sigma, xi, cdf, lp):
    if cdf is not None:
        assert gev_cdf(z, mu, sigma, xi) == pytest.approx(cdf, rel=1e-13)
    assert gev_logpdf(z, mu, sigma, xi) == pytest.approx(lp, rel=1e-13)


def test_quantile_reference():
    assert gev_quantile(0.9, 1.0, 0.5, -0.2) == pytest.approx(1.906046725761571705, rel=1e-13)


def test_gumbel_median():
    # mu - sigma log log 2
    assert gev_median(0.0, 1.0, 0.0) == pytest.approx(0.3665129205816643, rel=1e-14)


def test_matches_scipy_convention():
    z = np.linspace(-0.5, 2.0, 11)
    for xi in (-0.4, 0.25):
        ref = stats.genextreme(c=-xi, loc=0.3, scale=0.7)
        np.testing.assert_allclose(gev_cdf(z, 0.3, 0.7, xi), ref.cdf(z), rtol=1e-12, atol=1e-300)
        ok = np.isfinite(ref.logpdf(z))
        np.testing.assert_allclose(gev_logpdf(z, 0.3, 0.7, xi)[ok], ref.logpdf(z)[ok], rtol=1e-11)


def test_outside_support_is_minus_inf():
    lp, dmu, dls, dxi, outside = gev_logpdf_grad(5.0, 0.0, 0.0, -0.5)  # upper endpoint at 2
    assert lp == -np.inf and outside and np.isnan(dmu)
    assert gev_cdf(5.0, 0.0, 1.0, -0.5) == 1.0
    assert gev_cdf(-5.0, 0.0, 1.0, 0.5) == 0.0


def test_invalid_scale():
    with pytest.raises(ValueError):
        gev_cdf(0.0, 0.0, -1.0, 0.1)
    with pytest.raises(ValueError):
        GevParams(0.0, 0.0, 0.1)


def test_quantile_level_bounds():
    for q in (0.0, 1.0):
        with pytest.raises(ValueError):
            gev_quantile(q, 0.0, 1.0, 0.1)


@pytest.mark.parametrize("xi", [-0.9, -0.5, -1e-12, 0.0, 0.3])
def test_quantile_cdf_round_trip(xi):
    q = np.linspace(0.01, 0.99, 99)
    np.testing.assert_allclose(gev_cdf(gev_quantile(q, 0.4, 1.3, xi), 0.4, 1.3, xi), q, atol=1e-10, rtol=0)


@pytest.mark.parametrize("xi", [-0.5, -1e-7, 0.0, 1e-7, 0.3])
def test_density_integrates_to_one(xi):
    lo = gev_quantile(1e-12, 0.0, 1.0, xi)
    hi = gev_quantile(1 - 1e-12, 0.0, 1.0, xi)
    val, _ = integrate.quad(lambda z: np.exp(gev_logpdf(z, 0.0, 1.0, xi)), lo, hi, limit=200)
    assert val == pytest.approx(1.0, abs=1e-4)


def _fd(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2 * h)


@given(z=st.floats(-1.0, 3.0), mu=st.floats(-0.5, 1.5), ls=st.floats(-1.0, 0.5),
       xi=st.sampled_from([-0.4, -0.1, -3e-6, 0.0, 2e-6, 0.2]))
def test_logpdf_partials_match_finite_differences(z, mu, ls, xi):
    lp, dmu, dls, dxi, outside = gev_logpdf_grad(z, mu, ls, xi)
    if outside:
        return
    # skip points close to the support boundary where differences straddle it
    s = (z - mu) / np.exp(ls)
    if 1 + xi * s < 1e-2 or abs(s) > 8:
        return
    f = lambda m: gev_logpdf_grad(z, m, ls, xi)[0]
    g = lambda l: gev_logpdf_grad(z, mu, l, xi)[0]
    assert dmu == pytest.approx(_fd(f, mu), rel=1e-5, abs=1e-6)
    assert dls == pytest.approx(_fd(g, ls), rel=1e-5, abs=1e-6)
    if abs(xi) > 1e-4:
        k = lambda x: gev_logpdf_grad(z, mu, ls, x)[0]
        assert dxi == pytest.approx(_fd(k, xi, 1e-7), rel=1e-4, abs=1e-5)


def test_xi_derivative_continuous_across_series_switch():
    z, mu, ls = 1.2, 0.5, -0.3
    vals = [gev_logpdf_grad(z, mu, ls, x)[3] for x in (-2e-5, -1.0001e-5, -0.9999e-5, 0.0, 0.9999e-5, 1.0001e-5)]
    assert np.ptp(vals) < 1e-3
    # Gumbel branch value equals the series limit
    assert vals[3] == pytest.approx(gev_logpdf_grad(z, mu, ls, 1e-8)[3], abs=1e-6)


def test_day_transform():
    assert z_to_day(1.2976) == pytest.approx(99.98631567771630, rel=1e-13)
    assert date_to_z(366.0) == 0.0
    np.testing.assert_allclose(z_to_day(date_to_z(np.array([1.0, 100.5, 300.0]))), [1.0, 100.5, 300.0])
    with pytest.raises(ValueError):
        date_to_z(0.0)


@given(st.floats(0.5, 366.0), st.floats(0.5, 366.0))
def test_day_transform_is_decreasing(a, b):
    if a < b:
        assert date_to_z(a) > date_to_z(b)


def test_poisson_and_binomial():
    ll, g = poisson_loglik_grad(3, np.log(2.0))
    assert ll == pytest.approx(stats.poisson.logpmf(3, 2.0), rel=1e-13)
    assert g == pytest.approx(1.0)
    x = 0.3
    p = cloglog_prob(x)
    assert p == pytest.approx(1 - np.exp(-np.exp(x)))
    ll, g = binomial_cloglog_loglik_grad(4, 10, x)
    assert ll == pytest.approx(stats.binom.logpmf(4, 10, p), rel=1e-12)
    num = (binomial_cloglog_loglik_grad(4, 10, x + 1e-6)[0] - binomial_cloglog_loglik_grad(4, 10, x - 1e-6)[0]) / 2e-6
    assert g == pytest.approx(num, rel=1e-6)
    # zero successes at very small intensity stays finite
    ll0, _ = binomial_cloglog_loglik_grad(0, 5, -50.0)
    assert np.isfinite(ll0)
    with pytest.raises(ValueError):
        binomial_cloglog_loglik_grad(6, 5, 0.0)
    with pytest.raises(ValueError):
        count_loglik_grad("binomial", 1, 0.0)
    with pytest.raises(ValueError):
        count_loglik_grad("negbin", 1, 0.0)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_cloglog_monotone(a, b):
    if a < b:
        assert cloglog_prob(a) <= cloglog_prob(b)

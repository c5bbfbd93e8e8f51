"""Probability kernels for the data layer.

GEV distribution (CDF, quantile, log-density with analytic partials), the
day-of-year transform, and Poisson / cloglog-binomial log-likelihoods.
Functions accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

GUMBEL_TOL = 1e-10
XI_SERIES_TOL = 1e-5
DAYS_IN_YEAR = 366.0


@dataclass(frozen=True)
class GevParams:
    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"GEV scale must be positive, got {self.sigma}")


def _check_sigma(sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("GEV scale must be positive")


def gev_cdf(z, mu, sigma, xi):
    """GEV distribution function, 0 below a finite lower endpoint and 1 above a
    finite upper endpoint."""
    _check_sigma(sigma)
    z, mu, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (z, mu, sigma, xi)))
    s = (z - mu) / sigma
    gumbel = np.abs(xi) < GUMBEL_TOL
    out = np.empty_like(s)
    out[gumbel] = np.exp(-np.exp(-s[gumbel]))
    g = ~gumbel
    t = 1.0 + xi[g] * s[g]
    inside = t > 0
    val = np.empty_like(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        val[inside] = np.exp(-np.exp(-np.log(t[inside]) / xi[g][inside]))
    # outside support: below lower endpoint (xi > 0) or above upper endpoint (xi < 0)
    val[~inside] = np.where(xi[g][~inside] > 0, 0.0, 1.0)
    out[g] = val
    return out[()] if out.ndim == 0 else out


def gev_quantile(q, mu, sigma, xi):
    """Inverse of :func:`gev_cdf` for ``0 < q < 1``."""
    _check_sigma(sigma)
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantile level must lie in (0, 1)")
    q, mu, sigma, xi = np.broadcast_arrays(q, *(np.asarray(a, dtype=float) for a in (mu, sigma, xi)))
    y = -np.log(-np.log(q))  # Gumbel standard quantile
    gumbel = np.abs(xi) < GUMBEL_TOL
    safe_xi = np.where(gumbel, 1.0, xi)
    # ((-log q)^(-xi) - 1) / xi, written with expm1 for small xi
    std = np.where(gumbel, y, np.expm1(safe_xi * y) / safe_xi)
    out = mu + sigma * std
    return out[()] if out.ndim == 0 else out


def gev_median(mu, sigma, xi):
    return gev_quantile(0.5, mu, sigma, xi)


def gev_logpdf_grad(z, mu, log_sigma, xi):
    """Log-density and its partial derivatives.

    Returns ``(logpdf, d_mu, d_log_sigma, d_xi, outside)``. Points outside the
    support get ``logpdf = -inf``, NaN partials and ``outside = True``.
    """
    z, mu, log_sigma, xi = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (z, mu, log_sigma, xi)))
    sigma = np.exp(log_sigma)
    s = (z - mu) / sigma
    logpdf = np.full(s.shape, -np.inf)
    d_mu = np.full(s.shape, np.nan)
    d_ls = np.full(s.shape, np.nan)
    d_xi = np.full(s.shape, np.nan)

    gumbel = np.abs(xi) < GUMBEL_TOL
    if np.any(gumbel):
        sg = s[gumbel]
        e = np.exp(-sg)
        logpdf[gumbel] = -log_sigma[gumbel] - sg - e
        d_mu[gumbel] = (1.0 - e) / sigma[gumbel]
        d_ls[gumbel] = -1.0 + sg * (1.0 - e)
        d_xi[gumbel] = 0.5 * sg**2 * (1.0 - e) - sg

    g = ~gumbel
    xg, sg = xi[g], s[g]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        arg = xg * sg
        inside = arg > -1.0
        log_t = np.log1p(np.where(inside, arg, 0.0))
        u = np.exp(-log_t / xg)
        t = np.exp(log_t)
        lp = -log_sigma[g] - (1.0 + 1.0 / xg) * log_t - u
        dm = (1.0 + xg - u) / (sigma[g] * t)
        dl = -1.0 + sg * (1.0 + xg - u) / t
        dx = (1.0 - u) * log_t / xg**2 - sg * (1.0 + xg - u) / (xg * t)
        small = np.abs(xg) < XI_SERIES_TOL
        if np.any(small):
            ss = sg[small]
            es = np.exp(-ss)
            c1 = 0.5 * ss**2 - ss - 0.5 * es * ss**2
            c2 = 0.5 * ss**2 - ss**3 / 3.0 - es * (ss**4 / 8.0 - ss**3 / 3.0)
            dx[small] = c1 + 2.0 * xg[small] * c2
        ok = inside & np.isfinite(lp)
    logpdf[g] = np.where(ok, lp, -np.inf)
    d_mu[g] = np.where(ok, dm, np.nan)
    d_ls[g] = np.where(ok, dl, np.nan)
    d_xi[g] = np.where(ok, dx, np.nan)
    outside = ~np.isfinite(logpdf)
    if logpdf.ndim == 0:
        return float(logpdf), float(d_mu), float(d_ls), float(d_xi), bool(outside)
    return logpdf, d_mu, d_ls, d_xi, outside


def gev_logpdf(z, mu, sigma, xi):
    return gev_logpdf_grad(z, mu, np.log(sigma), xi)[0]


def gev_sample(rng, mu, sigma, xi, size=None):
    u = rng.uniform(size=size if size is not None else np.broadcast(mu, sigma, xi).shape)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return gev_quantile(u, mu, sigma, xi)


def date_to_z(day):
    """Transformed first-arrival value ``-log(day / 366)``; earlier days map to larger values."""
    day = np.asarray(day, dtype=float)
    if np.any(day <= 0):
        raise ValueError("day of year must be positive")
    out = -np.log(day / DAYS_IN_YEAR)
    return out[()] if out.ndim == 0 else out


def z_to_day(z):
    out = DAYS_IN_YEAR * np.exp(-np.asarray(z, dtype=float))
    return out[()] if out.ndim == 0 else out


def poisson_loglik_grad(n, x):
    """Poisson log-likelihood in the log-intensity ``x`` and its derivative."""
    n = np.asarray(n, dtype=float)
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        lam = np.exp(x)
    ll = n * x - lam - gammaln(n + 1.0)
    return ll, n - lam


def cloglog_prob(x):
    """Probability of at least one event under intensity ``exp(x)``."""
    with np.errstate(over="ignore"):
        return -np.expm1(-np.exp(x))


def binomial_cloglog_loglik_grad(n, trials, x):
    """Binomial log-likelihood with ``p = 1 - exp(-exp(x))`` and d/dx."""
    n = np.asarray(n, dtype=float)
    trials = np.asarray(trials, dtype=float)
    if np.any(n > trials):
        raise ValueError("binomial count exceeds number of trials")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        lam = np.exp(x)
        log_p = np.log(-np.expm1(-lam))
        log_c = gammaln(trials + 1.0) - gammaln(n + 1.0) - gammaln(trials - n + 1.0)
        # zero-count terms contribute nothing even when log p = -inf
        ll = np.where(n > 0, n * log_p, 0.0) - (trials - n) * lam + log_c
        grad = np.where(n > 0, n * lam / np.expm1(lam), 0.0) - (trials - n) * lam
    return ll, grad


def count_loglik_grad(kind, observed, x, trials=None):
    if kind == "poisson":
        return poisson_loglik_grad(observed, x)
    if kind in ("binomial", "binomial-cloglog"):
        if trials is None:
            raise ValueError("binomial likelihood needs the number of trials")
        return binomial_cloglog_loglik_grad(observed, trials, x)
    raise ValueError(f"unknown count likelihood {kind!r}")

"""Convergence diagnostics for scalar traces."""
from __future__ import annotations

import numpy as np


def autocorrelation(x) -> np.ndarray:
    """Biased sample autocorrelation at all lags via FFT."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def ess(trace) -> tuple[float, bool]:
    """Effective sample size with Geyer's initial monotone positive sequence.

    Returns ``(ess, constant)``; a constant trace has ESS 0 and the flag set.
    The estimate is capped at the trace length.
    """
    x = np.asarray(trace, dtype=float)
    n = len(x)
    if n < 10:
        raise ValueError("need at least 10 samples for an ESS estimate")
    if np.ptp(x) == 0:
        return 0.0, True
    rho = autocorrelation(x)
    # paired sums Gamma_k = rho_{2k} + rho_{2k+1}, summed while positive
    npairs = n // 2
    gamma = rho[: 2 * npairs : 2] + rho[1 : 2 * npairs : 2]
    stop = np.flatnonzero(gamma <= 0)
    m = stop[0] if stop.size else npairs
    # the first pair is always kept; the kept pairs are forced non-increasing
    m = max(m, 1)
    tau = -1.0 + 2.0 * np.minimum.accumulate(gamma[:m]).sum()
    if tau <= 1.0 / n:
        return float(n), False
    return float(min(n, n / tau)), False

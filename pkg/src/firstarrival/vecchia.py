"""Vecchia-approximated Gaussian fields with exponential covariance.

The joint density of a field is replaced by a product of univariate
conditionals, each conditioning on at most ``k`` nearby points that come
earlier in a maximin ordering. Writing ``B`` for the unit lower-triangular
(in ordered space) regression matrix and ``V`` for the conditional variances,
the implied precision is ``B^T V^{-1} B``; every operation below is
``O(D k)`` once the coefficients are known.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class FactorizationError(ValueError):
    """Raised when a conditional variance is not strictly positive."""


@dataclass(frozen=True)
class GpHyper:
    sd: float
    range: float

    def __post_init__(self):
        if not (self.sd >= 0 and self.range > 0):
            raise ValueError(f"invalid GP hyperparameters sd={self.sd}, range={self.range}")


@dataclass(frozen=True)
class PcCalibration:
    """Tail calibration ``P(range < range0) = alpha_range``, ``P(sd > sd0) = alpha_sd``."""
    range0: float = 40.0
    alpha_range: float = 0.05
    sd0: float = 3.0
    alpha_sd: float = 0.05

    @property
    def lam_range(self):
        return -np.log(self.alpha_range) * self.range0

    @property
    def lam_sd(self):
        return -np.log(self.alpha_sd) / self.sd0

    def median(self) -> GpHyper:
        return GpHyper(sd=np.log(2.0) / self.lam_sd, range=self.lam_range / np.log(2.0))


def exp_cov(d, h: GpHyper):
    return h.sd**2 * np.exp(-np.asarray(d, dtype=float) / h.range)


def pc_prior_logdensity(h: GpHyper, calib: PcCalibration) -> float:
    """Joint PC log-density of (range, sd) for an exponential-covariance field."""
    if not (h.sd > 0 and h.range > 0):
        raise ValueError("PC prior needs positive sd and range")
    if min(calib.range0, calib.sd0) <= 0 or not (0 < calib.alpha_range < 1 and 0 < calib.alpha_sd < 1):
        raise ValueError("invalid PC prior calibration")
    l1, l2 = calib.lam_range, calib.lam_sd
    return float(np.log(l1 * l2) - 2.0 * np.log(h.range) - l1 / h.range - l2 * h.sd)


def center_field(x):
    x = np.asarray(x, dtype=float)
    return x - x.mean()


def _as_locations(locations):
    locs = np.asarray(locations, dtype=float)
    if locs.ndim == 1:
        locs = locs[:, None]
    return locs


def maximin_ordering(locations) -> np.ndarray:
    """Start at the point nearest the centroid, then repeatedly add the point
    farthest from everything already ordered (lowest index wins ties)."""
    locs = _as_locations(locations)
    n = locs.shape[0]
    if n == 0:
        raise ValueError("need at least one location")
    if n > 1:
        uniq = np.unique(locs, axis=0)
        if uniq.shape[0] != n:
            raise ValueError("duplicate coordinates in maximin ordering")
    centroid = locs.mean(axis=0)
    first = int(np.argmin(np.linalg.norm(locs - centroid, axis=1)))
    order = [first]
    mind = np.linalg.norm(locs - locs[first], axis=1)
    mind[first] = -np.inf
    for _ in range(n - 1):
        nxt = int(np.argmax(mind))  # argmax returns the first maximiser
        order.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(locs - locs[nxt], axis=1))
        mind[order] = -np.inf
    return np.asarray(order, dtype=np.int64)


def build_conditioning(order, locations, k: int) -> list[np.ndarray]:
    """Conditioning sets per ordered position: the ``min(i, k)`` nearest
    previously ordered points, as original indices, nearest first."""
    if k < 1:
        raise ValueError("k must be at least 1")
    locs = _as_locations(locations)
    order = np.asarray(order)
    sets = []
    for i in range(len(order)):
        prev = order[:i]
        if i == 0:
            sets.append(np.empty(0, dtype=np.int64))
            continue
        d = np.linalg.norm(locs[prev] - locs[order[i]], axis=1)
        pick = np.lexsort((prev, d))[: min(i, k)]
        sets.append(prev[pick].astype(np.int64))
    return sets


class VecchiaGeometry:
    """Ordering, conditioning sets and the distances needed to rebuild factors.

    Geometry does not depend on hyperparameters, so it is built once per fit.
    """

    def __init__(self, locations, k: int = 5):
        self.locations = _as_locations(locations)
        n = self.locations.shape[0]
        self.n = n
        self.k = int(min(k, max(n - 1, 0)))
        self.order = maximin_ordering(self.locations)
        self.cond_sets = build_conditioning(self.order, self.locations, max(k, 1))
        kk = self.k
        self.nbr = np.zeros((n, kk), dtype=np.int64)
        self.mask = np.zeros((n, kk), dtype=bool)
        for i, s in enumerate(self.cond_sets):
            self.nbr[i, : len(s)] = s
            self.mask[i, : len(s)] = True
        here = self.locations[self.order]
        there = self.locations[self.nbr]
        self.dist_si = np.linalg.norm(there - here[:, None, :], axis=-1)
        self.dist_ss = np.linalg.norm(there[:, :, None, :] - there[:, None, :, :], axis=-1)

    def factor(self, h: GpHyper) -> VecchiaFactor:
        return VecchiaFactor.from_geometry(self, h)


class VecchiaFactor:
    """Sparse factor of a Vecchia-approximated exponential-covariance field.

    Attributes:
        order: maximin permutation; row ``i`` describes point ``order[i]``.
        nbr: (D, k) conditioning indices (original indexing, zero-padded).
        coef: (D, k) regression coefficients; padded entries are 0.
        var: (D,) conditional variances.
    """

    def __init__(self, order, nbr, coef, var, hyper: GpHyper | None = None):
        self.order = np.ascontiguousarray(order, dtype=np.int64)
        self.nbr = np.ascontiguousarray(nbr, dtype=np.int64)
        self.coef = np.ascontiguousarray(coef, dtype=float)
        self.var = np.ascontiguousarray(var, dtype=float)
        self.hyper = hyper
        self.n = len(self.order)
        if not np.all(self.var > 0):
            bad = int(np.argmin(self.var))
            raise FactorizationError(f"non-positive conditional variance at ordered index {bad}")

    @classmethod
    def from_geometry(cls, geom: VecchiaGeometry, h: GpHyper) -> VecchiaFactor:
        if h.sd == 0:
            raise FactorizationError("zero standard deviation gives a degenerate field")
        n, kk = geom.n, geom.k
        if kk == 0:
            return cls(geom.order, geom.nbr, np.zeros((n, 0)), np.full(n, h.sd**2), h)
        m = geom.mask
        r_si = np.where(m, np.exp(-geom.dist_si / h.range), 0.0)
        pair = m[:, :, None] & m[:, None, :]
        eye = np.eye(kk, dtype=bool)[None]
        r_ss = np.where(pair, np.exp(-geom.dist_ss / h.range), np.where(eye, 1.0, 0.0))
        try:
            coef = np.linalg.solve(r_ss, r_si[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(str(exc)) from exc
        resid = 1.0 - np.einsum("ij,ij->i", r_si, coef)
        if not np.all(np.isfinite(coef)) or not np.all(resid > 1e-12):
            bad = int(np.argmin(np.where(np.isfinite(resid), resid, -np.inf)))
            raise FactorizationError(
                f"conditional variance {resid[bad]:.3g} at ordered index {bad} is not positive")
        return cls(geom.order, geom.nbr, coef, h.sd**2 * resid, h)

    @classmethod
    def build(cls, cond_sets, locations, h: GpHyper, order=None) -> VecchiaFactor:
        """Factor from explicit conditioning sets (one per ordered position)."""
        locs = _as_locations(locations)
        n = len(cond_sets)
        if order is None:
            raise ValueError("ordering is required")
        kk = max((len(s) for s in cond_sets), default=0)
        nbr = np.zeros((n, kk), dtype=np.int64)
        coef = np.zeros((n, kk))
        var = np.empty(n)
        for i, s in enumerate(cond_sets):
            j = order[i]
            if len(s) == 0:
                var[i] = h.sd**2
                continue
            c_ss = exp_cov(np.linalg.norm(locs[s][:, None] - locs[s][None], axis=-1), h)
            c_si = exp_cov(np.linalg.norm(locs[s] - locs[j], axis=-1), h)
            b = np.linalg.solve(c_ss, c_si)
            nbr[i, : len(s)] = s
            coef[i, : len(s)] = b
            var[i] = h.sd**2 - c_si @ b
        return cls(order, nbr, coef, var, h)

    # -- core sparse products -------------------------------------------------
    def residual(self, x):
        """``B x`` in ordered space: ``x_{m(i)} - b_i . x_{S(i)}``."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"field has shape {x.shape}, expected ({self.n},)")
        if self.coef.shape[1] == 0:
            return x[self.order].copy()
        return x[self.order] - np.einsum("ij,ij->i", self.coef, x[self.nbr])

    def residual_transpose(self, w):
        """``B^T w`` for ordered-space ``w``; result in original indexing."""
        out = np.zeros(self.n)
        out[self.order] = w
        if self.coef.shape[1]:
            out -= np.bincount(self.nbr.ravel(), weights=(self.coef * w[:, None]).ravel(),
                               minlength=self.n)
        return out

    def logdensity(self, x) -> float:
        r = self.residual(x)
        return float(-0.5 * np.sum(r * r / self.var) - 0.5 * np.sum(np.log(self.var))
                     - 0.5 * self.n * LOG_2PI)

    def logdensity_grad(self, x):
        r = self.residual(x)
        w = r / self.var
        ld = float(-0.5 * np.sum(r * w) - 0.5 * np.sum(np.log(self.var)) - 0.5 * self.n * LOG_2PI)
        return ld, -self.residual_transpose(w)

    def precision_apply(self, x):
        return self.residual_transpose(self.residual(x) / self.var)

    def quad(self, r) -> float:
        """``r^T Q r`` with ``Q`` the implied precision."""
        e = self.residual(r)
        return float(np.sum(e * e / self.var))

    def logdet_cov(self) -> float:
        return float(np.sum(np.log(self.var)))

    def cov_apply(self, g):
        """``Sigma g`` through two triangular solves."""
        y = _solve_bt(self.order, self.nbr, self.coef, np.asarray(g, dtype=float))
        return _solve_b(self.order, self.nbr, self.coef, y * self.var)

    def cov_sqrt_apply(self, eps):
        """``B^{-1} V^{1/2} eps``, a draw from the implied joint when eps is iid N(0, 1)."""
        return _solve_b(self.order, self.nbr, self.coef, np.sqrt(self.var) * np.asarray(eps, dtype=float))

    def sample(self, rng):
        return self.cov_sqrt_apply(rng.standard_normal(self.n))

    def dense_precision(self):
        b = np.zeros((self.n, self.n))
        b[np.arange(self.n), self.order] = 1.0
        for j in range(self.coef.shape[1]):
            np.add.at(b, (np.arange(self.n), self.nbr[:, j]), -self.coef[:, j])
        return b.T @ (b / self.var[:, None])

    # -- sum-to-zero constraint ----------------------------------------------
    @cached_property
    def _ones_cov(self):
        w1 = self.cov_apply(np.ones(self.n))
        return w1, float(w1.sum())

    def constrained_cov_apply(self, g):
        """Covariance of the field conditioned on ``sum(x) = 0``, applied to ``g``."""
        w1, s = self._ones_cov
        wg = self.cov_apply(g)
        return wg - w1 * (wg.sum() / s)

    def constrained_project(self, e):
        """Conditioning by kriging: map a draw of the field onto ``sum(x) = 0``."""
        w1, s = self._ones_cov
        return e - w1 * (np.sum(e) / s)

    def constraint_log_correction(self) -> float:
        """``log N(0; 0, 1^T Sigma 1)`` subtracted to condition on a zero sum."""
        return 0.5 * (LOG_2PI + np.log(self._ones_cov[1]))


@numba.njit(cache=True)
def _solve_b(order, nbr, coef, e):
    n = order.shape[0]
    k = coef.shape[1]
    x = np.zeros(n)
    for i in range(n):
        acc = e[i]
        for j in range(k):
            acc += coef[i, j] * x[nbr[i, j]]
        x[order[i]] = acc
    return x


@numba.njit(cache=True)
def _solve_bt(order, nbr, coef, c):
    n = order.shape[0]
    k = coef.shape[1]
    acc = c.copy()
    y = np.zeros(n)
    for i in range(n - 1, -1, -1):
        yi = acc[order[i]]
        y[i] = yi
        for j in range(k):
            acc[nbr[i, j]] += coef[i, j] * yi
    return y


def build_factor(cond_sets, locations, h: GpHyper, order) -> VecchiaFactor:
    return VecchiaFactor.build(cond_sets, locations, h, order=order)


def vecchia_logdensity_grad(x, f: VecchiaFactor):
    return f.logdensity_grad(x)


def vecchia_sample(f: VecchiaFactor, rng):
    return f.sample(rng)

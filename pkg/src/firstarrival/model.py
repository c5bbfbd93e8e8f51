"""Hierarchical model: latent state, linear predictors and the log-posterior.

Data layer (per pixel i, year t)::

    N_bbs[j] ~ Pois(sum_k w_jk exp(b0_bbs + x_niche[k]))
    N_ckl    ~ Pois(exp(b0_ckl + x_year[t] + x_pref[i]) * area_i / baseline)
    N_spc    ~ Bin(N_ckl, 1 - exp(-exp(b0_spc + x_niche[i] + b_act / d)))
    Z        ~ GEV(g(x_bound, x_effort), exp(b0_sigma + x_gev_sigma[i]), xi)

with ``x_bound = b0_mu + x_gev_mu[i] + b1_mu * NAO_t + theta_niche_gev * x_niche[i]``,
``x_effort = theta_eff + theta_pref * log lambda_ckl + theta_act / d`` and
``g(a, e) = exp(a) / (1 + exp(-e))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit, gammaln

from .config import FIELDS, ModelConfig
from .distributions import binomial_cloglog_loglik_grad, cloglog_prob, gev_logpdf_grad
from .grid_data import PixelGrid, ResponseTables, route_intensity_weights
from .vecchia import GpHyper, VecchiaFactor, VecchiaGeometry, pc_prior_logdensity

log = logging.getLogger(__name__)

SCALARS = ("beta0_bbs", "beta0_ckl", "beta0_spc", "beta_act",
           "beta0_mu", "beta1_mu", "beta0_sigma",
           "theta_eff", "theta_pref", "theta_act", "theta_niche_gev", "xi")
SCALAR_BLOCKS = {
    "count": ("beta0_bbs", "beta0_ckl", "beta0_spc", "beta_act"),
    "sharing": ("theta_eff", "theta_pref", "theta_act", "theta_niche_gev"),
    "gev": ("beta0_mu", "beta1_mu", "beta0_sigma", "xi"),
}
SPATIAL_FIELDS = ("x_pref", "x_niche", "x_gev_mu", "x_gev_sigma")
DATA_TERMS = ("bbs", "ckl", "spc", "gev")
# likelihood terms each field enters
FIELD_TERMS = {
    "x_pref": ("ckl", "gev"),
    "x_year": ("ckl", "gev"),
    "x_niche": ("bbs", "spc", "gev"),
    "x_gev_mu": ("gev",),
    "x_gev_sigma": ("gev",),
}


def saturating_g(x_bound, x_effort):
    """Bounded effort link ``exp(x_bound) / (1 + exp(-x_effort))``."""
    return np.exp(x_bound) * expit(x_effort)


def effort(theta_eff, theta_pref, theta_act, lam_ckl, duration):
    """Combined sampling effort; an infinite duration removes the activity term."""
    duration = np.asarray(duration, dtype=float)
    if np.any(duration <= 0):
        raise ValueError("median duration must be positive")
    lam_ckl = np.asarray(lam_ckl, dtype=float)
    if np.any(lam_ckl <= 0):
        raise ValueError("checklist intensity must be positive")
    return theta_eff + theta_pref * np.log(lam_ckl) + theta_act / duration


@dataclass
class LatentState:
    fields: dict[str, np.ndarray]
    scalars: dict[str, float]
    hyper: dict[str, GpHyper]

    @classmethod
    def zeros(cls, n_pixels: int, n_years: int, hyper: dict[str, GpHyper]) -> LatentState:
        flds = {f: np.zeros(n_years if f == "x_year" else n_pixels) for f in FIELDS}
        return cls(flds, {s: 0.0 for s in SCALARS}, dict(hyper))

    def copy(self) -> LatentState:
        return LatentState({k: v.copy() for k, v in self.fields.items()}, dict(self.scalars),
                           dict(self.hyper))

    def with_field(self, name, values) -> LatentState:
        new = LatentState(dict(self.fields), self.scalars, self.hyper)
        new.fields[name] = values
        return new

    def with_scalars(self, updates: dict) -> LatentState:
        return LatentState(self.fields, {**self.scalars, **updates}, self.hyper)

    def with_hyper(self, name, h: GpHyper) -> LatentState:
        return LatentState(self.fields, self.scalars, {**self.hyper, name: h})


@dataclass
class PredictorValues:
    log_lam_bbs: np.ndarray  # (D,)
    log_lam_ckl: np.ndarray  # (D, T), includes the area offset
    cloglog_spc: np.ndarray  # (D, T), activity term dropped where no duration
    mu: np.ndarray  # (D, T)
    log_sigma: np.ndarray  # (D,)
    x_bound: np.ndarray = field(repr=False, default=None)
    x_effort: np.ndarray = field(repr=False, default=None)


class Model:
    """Precomputed data layout plus the log-posterior and its block gradients."""

    def __init__(self, grid: PixelGrid, tables: ResponseTables, config: ModelConfig | None = None):
        self.grid = grid
        self.tables = tables
        self.config = config or ModelConfig()
        cfg = self.config
        D, T = grid.n_pixels, grid.n_years
        self.D, self.T = D, T
        if tables.nao.shape != (T,) or not np.all(np.isfinite(tables.nao)):
            raise ValueError("NAO must be available for every modelled year")
        self.log_area = np.log(grid.area / cfg.area_baseline_km2)
        self.n_ckl = tables.n_ckl.astype(float)
        self.ckl_const = float(gammaln(self.n_ckl + 1.0).sum())
        has_d = tables.n_ckl > 0
        self.inv_d = np.where(has_d, 1.0 / np.where(has_d, tables.median_duration, 1.0), 0.0)

        self.pix_b, self.yr_b = np.nonzero(has_d)
        self.trials_b = self.n_ckl[has_d]
        self.n_b = tables.n_spc[has_d].astype(float)
        self.invd_b = self.inv_d[has_d]

        has_z = ~np.isnan(tables.z)
        self.pix_g, self.yr_g = np.nonzero(has_z)
        self.z_g = tables.z[has_z]
        self.invd_g = self.inv_d[has_z]
        self.nao_g = tables.nao[self.yr_g]

        rows, cols, vals = [], [], []
        for j, route in enumerate(tables.routes):
            for p, w in route_intensity_weights(route):
                rows.append(j)
                cols.append(p)
                vals.append(w)
        self.bbs_design = sparse.csr_matrix((vals, (rows, cols)), shape=(len(tables.routes), D))
        self.bbs_design_t = self.bbs_design.T.tocsr()
        self.n_bbs = np.asarray(tables.n_bbs, dtype=float)
        self.bbs_const = float(gammaln(self.n_bbs + 1.0).sum())

        self.geometry = {"spatial": VecchiaGeometry(grid.coords, cfg.k_neighbors),
                         "temporal": VecchiaGeometry(grid.years.astype(float), min(cfg.k_neighbors, max(T - 1, 1)))}
        self.data_terms = ("gev",) if cfg.gev_only else DATA_TERMS
        self.frozen_scalars = set()
        if cfg.gev_only:
            self.frozen_scalars |= set(SCALAR_BLOCKS["count"]) | set(SCALAR_BLOCKS["sharing"])
        elif not cfg.share_niche_gev:
            self.frozen_scalars.add("theta_niche_gev")
        if cfg.gev_only:
            self.active_fields = ("x_gev_mu", "x_gev_sigma")
        else:
            self.active_fields = FIELDS
        self.overflow_count = 0

    # -- geometry / factors ---------------------------------------------------
    def geometry_for(self, name: str) -> VecchiaGeometry:
        return self.geometry["temporal" if name == "x_year" else "spatial"]

    def factor(self, name: str, h: GpHyper) -> VecchiaFactor:
        return self.geometry_for(name).factor(h)

    def factors(self, state: LatentState) -> dict[str, VecchiaFactor]:
        return {f: self.factor(f, state.hyper[f]) for f in FIELDS}

    def initial_state(self) -> LatentState:
        cfg = self.config
        hyper = {f: cfg.pc_for(f).median() for f in FIELDS}
        return LatentState.zeros(self.D, self.T, hyper)

    # -- predictors -----------------------------------------------------------
    def log_lambda_ckl(self, state: LatentState):
        s, f = state.scalars, state.fields
        return s["beta0_ckl"] + f["x_pref"][:, None] + f["x_year"][None, :] + self.log_area[:, None]

    def x_bound(self, state: LatentState, pix, nao):
        s, f = state.scalars, state.fields
        return (s["beta0_mu"] + f["x_gev_mu"][pix] + s["beta1_mu"] * nao
                + s["theta_niche_gev"] * f["x_niche"][pix])

    def x_effort(self, state: LatentState, log_lam_ckl, inv_d):
        s = state.scalars
        return s["theta_eff"] + s["theta_pref"] * log_lam_ckl + s["theta_act"] * inv_d

    def predictors(self, state: LatentState) -> PredictorValues:
        s, f = state.scalars, state.fields
        D, T = self.D, self.T
        log_lam = self.log_lambda_ckl(state)
        eta = s["beta0_spc"] + f["x_niche"][:, None] + s["beta_act"] * self.inv_d
        pix = np.repeat(np.arange(D), T)
        xb = self.x_bound(state, pix, np.tile(self.tables.nao, D)).reshape(D, T)
        xe = self.x_effort(state, log_lam, self.inv_d)
        return PredictorValues(
            log_lam_bbs=s["beta0_bbs"] + f["x_niche"],
            log_lam_ckl=log_lam,
            cloglog_spc=eta,
            mu=np.exp(xb) if self.config.gev_only else saturating_g(xb, xe),
            log_sigma=s["beta0_sigma"] + f["x_gev_sigma"],
            x_bound=xb, x_effort=xe)

    # -- likelihood -------------------------------------------------------------
    def _terms(self, state: LatentState, terms, want_grad=False):
        """Selected likelihood sums, plus per-cell derivatives when asked."""
        s, f = state.scalars, state.fields
        out, d = {}, {}
        log_lam = None
        if "ckl" in terms or "gev" in terms:
            log_lam = self.log_lambda_ckl(state)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if "ckl" in terms:
                lam = np.exp(log_lam)
                out["ckl"] = float(np.sum(self.n_ckl * log_lam - lam)) - self.ckl_const
                if want_grad:
                    d["ckl"] = self.n_ckl - lam
            if "bbs" in terms:
                unit = np.exp(s["beta0_bbs"] + f["x_niche"])
                lam_obs = self.bbs_design @ unit
                out["bbs"] = float(np.sum(self.n_bbs * np.log(lam_obs) - lam_obs)) - self.bbs_const
                if want_grad:
                    d["bbs"] = unit * (self.bbs_design_t @ (self.n_bbs / lam_obs - 1.0))
            if "spc" in terms:
                eta = s["beta0_spc"] + f["x_niche"][self.pix_b] + s["beta_act"] * self.invd_b
                ll, g = binomial_cloglog_loglik_grad(self.n_b, self.trials_b, eta)
                out["spc"] = float(np.sum(ll))
                if want_grad:
                    d["spc"] = g
            if "gev" in terms:
                xb = self.x_bound(state, self.pix_g, self.nao_g)
                xe = self.x_effort(state, log_lam[self.pix_g, self.yr_g], self.invd_g)
                sat = 1.0 if self.config.gev_only else expit(xe)
                mu = np.exp(xb) * sat
                ls = s["beta0_sigma"] + f["x_gev_sigma"][self.pix_g]
                lp, dmu, dls, _, _ = gev_logpdf_grad(self.z_g, mu, ls, s["xi"])
                out["gev"] = float(np.sum(lp))
                if want_grad:
                    d["gev_bound"] = dmu * mu
                    d["gev_effort"] = dmu * mu * (1.0 - sat)
                    d["gev_log_sigma"] = dls
        for k, v in out.items():
            if np.isnan(v) or v == np.inf:
                self.overflow_count += 1
                out[k] = -np.inf
        return out, d

    def loglik_terms(self, state: LatentState, terms=None) -> dict[str, float]:
        terms = self.data_terms if terms is None else tuple(t for t in terms if t in self.data_terms)
        return self._terms(state, terms)[0]

    # -- priors -----------------------------------------------------------------
    def field_log_prior(self, name: str, x, factor: VecchiaFactor) -> float:
        """Vecchia density of a zero-sum field, conditioned on its sum being 0."""
        return factor.logdensity(x) + factor.constraint_log_correction()

    def scalar_log_prior(self, scalars: dict) -> float:
        cfg = self.config
        if not cfg.xi_lower < scalars["xi"] < cfg.xi_upper:
            return -np.inf
        v = np.array([scalars[k] for k in SCALARS])
        return float(-0.5 * np.sum(v * v) / cfg.scalar_prior_var
                     - 0.5 * len(v) * np.log(2.0 * np.pi * cfg.scalar_prior_var))

    def hyper_log_prior(self, name: str, h: GpHyper) -> float:
        return pc_prior_logdensity(h, self.config.pc_for(name))

    def joint_log_posterior(self, state: LatentState, factors=None, detail=False):
        factors = factors or self.factors(state)
        parts = dict(self.loglik_terms(state))
        for f in FIELDS:
            parts[f"prior_{f}"] = self.field_log_prior(f, state.fields[f], factors[f])
            parts[f"hyper_{f}"] = self.hyper_log_prior(f, state.hyper[f])
        parts["prior_scalars"] = self.scalar_log_prior(state.scalars)
        total = float(sum(parts.values()))
        if np.isnan(total):
            total = -np.inf
        return (total, parts) if detail else total

    # -- blocks -----------------------------------------------------------------
    def block_log_posterior_grad(self, state: LatentState, block: str, factor: VecchiaFactor):
        """Log-posterior terms involving ``block`` and the exact gradient in it.

        The value differs from :meth:`joint_log_posterior` by terms that do
        not depend on the block.
        """
        if block not in FIELD_TERMS:
            raise ValueError(f"unknown field block {block!r}")
        terms = tuple(t for t in FIELD_TERMS[block] if t in self.data_terms)
        vals, d = self._terms(state, terms, want_grad=True)
        x = state.fields[block]
        prior, grad = factor.logdensity_grad(x)
        value = sum(vals.values()) + prior + factor.constraint_log_correction()
        s = state.scalars
        n = len(x)
        if "ckl" in d:
            grad = grad + (d["ckl"].sum(axis=1) if block == "x_pref" else d["ckl"].sum(axis=0))
        if "bbs" in d:
            grad = grad + d["bbs"]
        if "spc" in d:
            grad = grad + np.bincount(self.pix_b, weights=d["spc"], minlength=n)
        if "gev" in vals:
            if block == "x_pref":
                grad = grad + s["theta_pref"] * np.bincount(self.pix_g, weights=d["gev_effort"], minlength=n)
            elif block == "x_year":
                grad = grad + s["theta_pref"] * np.bincount(self.yr_g, weights=d["gev_effort"], minlength=n)
            elif block == "x_niche":
                grad = grad + s["theta_niche_gev"] * np.bincount(self.pix_g, weights=d["gev_bound"], minlength=n)
            elif block == "x_gev_mu":
                grad = grad + np.bincount(self.pix_g, weights=d["gev_bound"], minlength=n)
            elif block == "x_gev_sigma":
                grad = grad + np.bincount(self.pix_g, weights=d["gev_log_sigma"], minlength=n)
        if not np.isfinite(value):
            value = -np.inf
        return float(value), grad

    def block_gradient(self, state: LatentState, block: str, factor: VecchiaFactor | None = None):
        factor = factor or self.factor(block, state.hyper[block])
        return self.block_log_posterior_grad(state, block, factor)[1]

    def scalar_block_terms(self, block: str):
        """Likelihood terms that depend on a scalar block."""
        if block == "count":
            need = ("bbs", "ckl", "spc", "gev")
        else:
            need = ("gev",)
        return tuple(t for t in need if t in self.data_terms)

    # -- prediction helpers -------------------------------------------------------
    def presence_probability(self, state: LatentState, inv_d):
        """``p_spc`` per pixel for a given inverse duration (scalar or (D,))."""
        s, f = state.scalars, state.fields
        return cloglog_prob(s["beta0_spc"] + f["x_niche"] + s["beta_act"] * np.asarray(inv_d))


def data_driven_start(model: Model, state: LatentState) -> LatentState:
    """Intercepts matched to crude data summaries, mimicking a staged start.

    Fields stay at zero; the scalars set here are ones with closed-form moment
    estimates from the response tables.
    """
    t = model.tables
    upd = {}
    if "ckl" in model.data_terms:
        upd["beta0_ckl"] = float(np.log(max(t.n_ckl.mean(), 1e-3)) - model.log_area.mean())
    if "bbs" in model.data_terms and len(model.n_bbs):
        w = np.asarray(model.bbs_design.sum(axis=1)).ravel()
        upd["beta0_bbs"] = float(np.log(max(model.n_bbs.sum(), 1e-3) / w.sum()))
    if "spc" in model.data_terms and model.trials_b.sum() > 0:
        p = np.clip(model.n_b.sum() / model.trials_b.sum(), 1e-4, 1 - 1e-4)
        upd["beta0_spc"] = float(np.log(-np.log1p(-p)))
    if len(model.z_g) > 1:
        z = model.z_g
        sat = 1.0 if model.config.gev_only else expit(state.scalars["theta_eff"])
        # Gumbel moments: mean = mu + 0.5772 sigma, sd = pi sigma / sqrt(6)
        sig = max(float(np.std(z)) * np.sqrt(6.0) / np.pi, 1e-3)
        mu = max(float(np.mean(z)) - 0.5772 * sig, 1e-3)
        upd["beta0_mu"] = float(np.log(mu / sat))
        upd["beta0_sigma"] = float(np.log(sig))
    return state.with_scalars(upd)

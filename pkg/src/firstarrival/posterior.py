"""Posterior summaries: arrival-date prediction, niche masking, excursion
functions and land-cover correlations."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from .distributions import cloglog_prob, gev_median, z_to_day
from .draws import PosteriorDraws
from .grid_data import LANDCOVER_CLASSES
from .model import Model

log = logging.getLogger(__name__)

EFFORT_MODES = ("observed", "infinite")


@dataclass
class ArrivalPrediction:
    year: int
    mode: str
    days: np.ndarray  # (n_draws, D) per-draw GEV median day
    masked: np.ndarray  # (D,)
    quantile_levels: tuple[float, ...] = (0.1, 0.5, 0.9)
    clipped: int = 0
    summary: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        self.summary = {"mean": self.days.mean(axis=0)}
        for q in self.quantile_levels:
            self.summary[f"q{round(100 * q):02d}"] = np.quantile(self.days, q, axis=0)

    @property
    def debiased(self) -> bool:
        return self.mode == "infinite"

    def rows(self):
        keys = list(self.summary)
        for i in range(self.days.shape[1]):
            yield (i, self.year, self.mode, *(self.summary[k][i] for k in keys), int(self.masked[i]),
                   int(self.debiased))

    @property
    def columns(self):
        return ("pixel_id", "year", "mode", *self.summary, "masked", "debiased")


def pixel_mean_duration(model: Model) -> np.ndarray:
    """Mean over years of each pixel's median checklist duration (global mean
    for pixels without any checklist)."""
    d = model.tables.median_duration
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_pixel = np.nanmean(d, axis=1)
    fallback = np.nanmean(d) if np.any(np.isfinite(d)) else 60.0
    return np.where(np.isfinite(per_pixel), per_pixel, fallback)


def _duration_for(model: Model, t: int | None, duration_source):
    if duration_source is None or isinstance(duration_source, str):
        source = duration_source or "observed"
        mean = pixel_mean_duration(model)
        if source == "pixel_mean" or t is None:
            return mean
        if source != "observed":
            raise ValueError(f"unknown duration source {source!r}")
        d = model.tables.median_duration[:, t]
        return np.where(np.isfinite(d), d, mean)
    d = np.asarray(duration_source, dtype=float)
    if d.shape != (model.D,):
        raise ValueError("duration array must have one value per pixel")
    return d


def extend_year_effect(draws: PosteriorDraws, year: int) -> np.ndarray:
    """Per-draw temporal effect at ``year``: fitted value, or the GP
    conditional mean given the fitted years."""
    years = np.asarray(draws.years, dtype=float)
    hit = np.flatnonzero(draws.years == year)
    x = draws.fields["x_year"]
    if hit.size:
        return x[:, hit[0]]
    out = np.empty(len(draws))
    dist = np.abs(years[:, None] - years[None, :])
    for i in range(len(draws)):
        rng = draws.hyper["x_year"][i, 1]
        kmat = np.exp(-dist / rng)
        kvec = np.exp(-np.abs(years - year) / rng)
        out[i] = kvec @ np.linalg.solve(kmat, x[i])
    return out


def per_draw_location(model: Model, draws: PosteriorDraws, year: int, nao: float, effort_mode: str,
                      duration=None, lambda_source: str = "model"):
    """GEV location, log-scale and shape per draw, shape (n_draws, D)."""
    if effort_mode not in EFFORT_MODES:
        raise ValueError(f"effort mode must be one of {EFFORT_MODES}")
    s = draws.scalars
    f = draws.fields
    xb = (s["beta0_mu"][:, None] + f["x_gev_mu"] + s["beta1_mu"][:, None] * nao
          + s["theta_niche_gev"][:, None] * f["x_niche"])
    if effort_mode == "infinite" or model.config.gev_only:
        mu = np.exp(xb)
    else:
        x_year = extend_year_effect(draws, year)
        log_lam = s["beta0_ckl"][:, None] + f["x_pref"] + x_year[:, None] + model.log_area[None, :]
        if lambda_source == "observed":
            hit = np.flatnonzero(model.grid.years == year)
            if hit.size:
                n = model.tables.n_ckl[:, hit[0]]
                log_lam = np.where(n > 0, np.log(np.maximum(n, 1)), log_lam)
        xe = (s["theta_eff"][:, None] + s["theta_pref"][:, None] * log_lam
              + s["theta_act"][:, None] / duration[None, :])
        mu = np.exp(xb) * expit(xe)
    log_sigma = s["beta0_sigma"][:, None] + f["x_gev_sigma"]
    return mu, log_sigma, s["xi"][:, None]


def predict_arrival(model: Model, draws: PosteriorDraws, year: int, nao: float | None = None,
                    effort_mode: str = "observed", duration_source=None, lambda_source: str = "model",
                    mask_threshold: float = 0.01, quantiles=(0.1, 0.5, 0.9)) -> ArrivalPrediction:
    """Posterior of the GEV median first-arrival day per pixel for one year.

    ``effort_mode="infinite"`` replaces the effort pathway by its saturation
    limit, which removes the observation-effort bias from the location.
    """
    hit = np.flatnonzero(model.grid.years == year)
    t = int(hit[0]) if hit.size else None
    if nao is None:
        if t is None:
            raise ValueError(f"NAO value required for out-of-sample year {year}")
        nao = float(model.tables.nao[t])
    duration = _duration_for(model, t, duration_source)
    mu, log_sigma, xi = per_draw_location(model, draws, year, nao, effort_mode, duration, lambda_source)
    z_med = gev_median(mu, np.exp(log_sigma), np.broadcast_to(xi, mu.shape))
    days = z_to_day(z_med)
    clipped = int(np.sum(days > 366.0))
    if clipped:
        log.warning("%d per-draw median(s) fall after day 366 and were clipped", clipped)
        days = np.minimum(days, 366.0)
    masked = niche_mask(model, draws, mask_threshold)
    return ArrivalPrediction(int(year), effort_mode, days, masked, tuple(quantiles), clipped)


def niche_mask(model: Model, draws: PosteriorDraws, threshold: float = 0.01, duration_source=None):
    """Pixels whose posterior-mean presence probability is below ``threshold``,
    evaluated at the pixel's mean checklist duration over all years."""
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    d = _duration_for(model, None, duration_source or "pixel_mean")
    s = draws.scalars
    eta = s["beta0_spc"][:, None] + draws.fields["x_niche"] + s["beta_act"][:, None] / d[None, :]
    p = cloglog_prob(eta).mean(axis=0)
    return p < threshold


def excursion_function(samples, u: float, sign: str = "positive") -> np.ndarray:
    """Sample-based excursion function of a field.

    Pixels are ordered by decreasing marginal probability of exceeding ``u``
    (falling below it for ``sign="negative"``); the value at the j-th pixel
    is the fraction of draws in which all of the first j pixels exceed.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("no draws given")
    if x.shape[0] < 1000:
        warnings.warn(f"excursion function from only {x.shape[0]} draws", stacklevel=2)
    if sign == "positive":
        hit = x > u
    elif sign == "negative":
        hit = x < u
    else:
        raise ValueError("sign must be 'positive' or 'negative'")
    marginal = hit.mean(axis=0)
    order = np.argsort(-marginal, kind="stable")
    joint = np.logical_and.accumulate(hit[:, order], axis=1).mean(axis=0)
    out = np.empty(x.shape[1])
    out[order] = joint
    return out


@dataclass
class Correlation:
    field: str
    landcover_class: str
    rho: float
    undefined: bool


def landcover_correlation(field_means: dict[str, np.ndarray], landcover) -> list[Correlation]:
    """Spearman correlation of each posterior-mean field with each land-cover class."""
    lc = np.asarray(landcover, dtype=float)
    if lc.ndim != 2 or lc.shape[1] != len(LANDCOVER_CLASSES) or np.any(np.isnan(lc)):
        raise ValueError("land cover must be given for every pixel and class")
    out = []
    for name, values in field_means.items():
        v = np.asarray(values, dtype=float)
        for c, cls in enumerate(LANDCOVER_CLASSES):
            if np.ptp(v) == 0 or np.ptp(lc[:, c]) == 0:
                out.append(Correlation(name, cls, float("nan"), True))
                continue
            rho = stats.spearmanr(v, lc[:, c]).statistic
            out.append(Correlation(name, cls, float(rho), False))
    return out

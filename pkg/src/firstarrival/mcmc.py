"""MALA-within-Gibbs sampler for the hierarchical model.

Latent fields move by preconditioned Langevin proposals whose covariance is
the field's current Vecchia prior covariance (restricted to zero-sum fields);
scalar blocks and GP hyperparameters use random-walk Metropolis steps.
Step sizes adapt by Robbins-Monro during burn-in and are frozen afterwards.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import FIELDS, ChainConfig
from .draws import PosteriorDraws
from .model import SCALAR_BLOCKS, SCALARS, LatentState, Model, data_driven_start
from .vecchia import FactorizationError, GpHyper, VecchiaFactor

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class ChainError(RuntimeError):
    """A block update failed; the message names the iteration and block."""


# -- preconditioners -------------------------------------------------------------
class DensePreconditioner:
    """Preconditioner given by an explicit covariance matrix."""

    def __init__(self, cov):
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.chol = np.linalg.cholesky(self.cov)
        self.n = self.cov.shape[0]
        self._logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))

    def apply(self, g):
        return self.cov @ g

    def noise(self, eps):
        return self.chol @ eps

    def quad(self, r):
        y = np.linalg.solve(self.chol, r)
        return float(y @ y)

    def logdet(self):
        return self._logdet


class FieldPreconditioner:
    """Vecchia prior covariance of a field, optionally conditioned on a zero sum."""

    def __init__(self, factor: VecchiaFactor, constrained: bool = True):
        self.factor = factor
        self.constrained = constrained
        self.n = factor.n

    def apply(self, g):
        f = self.factor
        return f.constrained_cov_apply(g) if self.constrained else f.cov_apply(g)

    def noise(self, eps):
        e = self.factor.cov_sqrt_apply(eps)
        return self.factor.constrained_project(e) if self.constrained else e

    def quad(self, r):
        return self.factor.quad(r)

    def logdet(self):
        return self.factor.logdet_cov()


# -- Langevin proposals ------------------------------------------------------------
def mala_log_q(to, frm, grad_frm, delta, precond) -> float:
    """Log density of moving ``frm -> to`` under the Langevin proposal.

    Normalised as a full-rank Gaussian; for zero-sum fields the constant is
    the same in both directions and cancels in the Hastings ratio.
    """
    mean = frm + 0.5 * delta**2 * precond.apply(grad_frm)
    r = np.asarray(to) - mean
    n = len(r)
    return float(-0.5 * precond.quad(r) / delta**2 - 0.5 * n * (LOG_2PI + 2.0 * np.log(delta))
                 - 0.5 * precond.logdet())


def mala_propose(x, grad, delta, precond, rng, eps=None):
    """Draw ``x* ~ N(x + delta^2/2 W grad, delta^2 W)``; returns ``(x*, log q(x*|x))``."""
    if eps is None:
        eps = rng.standard_normal(len(x))
    mean = x + 0.5 * delta**2 * precond.apply(grad)
    x_star = mean + delta * precond.noise(eps)
    return x_star, mala_log_q(x_star, x, grad, delta, precond)


@dataclass
class MalaResult:
    x: np.ndarray
    logp: float
    grad: np.ndarray
    accepted: bool
    alpha: float


def mala_update(x, logp, grad, target, delta, precond, rng) -> MalaResult:
    """One Metropolis-adjusted Langevin step for ``target(x) -> (logp, grad)``."""
    if not np.all(np.isfinite(grad)) or not np.isfinite(logp):
        return MalaResult(x, logp, grad, False, 0.0)
    x_star, lq_fwd = mala_propose(x, grad, delta, precond, rng)
    logp_star, grad_star = target(x_star)
    u = rng.uniform()
    if not np.isfinite(logp_star) or not np.all(np.isfinite(grad_star)):
        return MalaResult(x, logp, grad, False, 0.0)
    lq_rev = mala_log_q(x, x_star, grad_star, delta, precond)
    log_ratio = logp_star - logp + lq_rev - lq_fwd
    alpha = float(np.exp(min(0.0, log_ratio)))
    if np.log(u) < log_ratio:
        return MalaResult(x_star, logp_star, grad_star, True, alpha)
    return MalaResult(x, logp, grad, False, alpha)


# -- adaptation ------------------------------------------------------------------
def adapt_step(delta: float, acc: float, target: float, t: int, frozen: bool = False) -> float:
    """Robbins-Monro update ``log delta += t^-0.6 (acc - target)``."""
    if frozen:
        warnings.warn("step-size adaptation is frozen after burn-in; delta unchanged", stacklevel=2)
        return delta
    return float(np.exp(np.log(delta) + t ** -0.6 * (acc - target)))


class RandomWalkBlock:
    """Random-walk Metropolis proposal ``x + delta L eps`` with adaptive scale.

    During adaptation the shape ``L`` is periodically reset to the Cholesky
    factor of the empirical covariance of the later half of the visited
    states, so the early transient does not inflate it. The Robbins-Monro
    clock restarts at each reset.
    """

    def __init__(self, dim, delta, target, adapt_cov=True, cov_start=1000, cov_every=500):
        self.dim = dim
        self.delta = float(delta)
        self.target = target
        self.chol = np.eye(dim)
        self.adapt_cov = adapt_cov
        self.cov_start = cov_start
        self.cov_every = cov_every
        self._history = []
        self._clock = 0
        self.resets = 0

    def propose(self, x, rng):
        return x + self.delta * (self.chol @ rng.standard_normal(self.dim))

    def adapt(self, alpha, x, t):
        self._clock += 1
        self.delta = adapt_step(self.delta, alpha, self.target, self._clock)
        if not self.adapt_cov or self.dim == 0:
            return
        self._history.append(np.array(x, dtype=float))
        n = len(self._history)
        if n >= self.cov_start and n % self.cov_every == 0:
            recent = np.asarray(self._history[n // 2 :])
            cov = np.atleast_2d(np.cov(recent, rowvar=False))
            scale = np.sqrt(np.mean(np.diag(cov)))
            if not scale > 0:
                return
            cov = cov + 1e-6 * scale**2 * np.eye(self.dim)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                return
            self.chol = chol
            if self.resets == 0:
                self.delta = 2.38 / np.sqrt(self.dim)
            self.resets += 1
            self._clock = 0


def rw_update(x, logp, log_target, block: RandomWalkBlock, rng):
    """One random-walk Metropolis step; returns ``(x, logp, accepted, alpha)``."""
    x_star = block.propose(x, rng)
    lp_star = log_target(x_star)
    u = rng.uniform()
    if not np.isfinite(lp_star):
        return x, logp, False, 0.0
    log_ratio = lp_star - logp
    alpha = float(np.exp(min(0.0, log_ratio)))
    if np.log(u) < log_ratio:
        return x_star, lp_star, True, alpha
    return x, logp, False, alpha


# -- generic drivers (used for testing the kernels on known targets) --------------
def mala_within_gibbs(logp_grad, x0, blocks, n_iter, burn_in, seed, target=0.57, delta0=0.5):
    """Cycle MALA updates over index blocks of a generic target.

    ``logp_grad(x)`` returns the log density and full gradient; ``blocks`` is a
    list of ``(indices, covariance)`` pairs giving each block's preconditioner.
    Returns post-burn-in samples and per-block acceptance rates.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    x = np.array(x0, dtype=float)
    pre = [(np.asarray(idx), DensePreconditioner(cov)) for idx, cov in blocks]
    deltas = [delta0] * len(pre)
    accepts = np.zeros(len(pre))
    out = np.empty((max(n_iter - burn_in, 0), len(x)))
    for it in range(1, n_iter + 1):
        for b, (idx, p) in enumerate(pre):
            def block_target(xb, idx=idx):
                full = x.copy()
                full[idx] = xb
                lp, g = logp_grad(full)
                return lp, g[idx]
            lp, g = block_target(x[idx])
            res = mala_update(x[idx], lp, g, block_target, deltas[b], p, rng)
            x[idx] = res.x
            if it <= burn_in:
                deltas[b] = adapt_step(deltas[b], res.alpha, target, it)
            else:
                accepts[b] += res.accepted
        if it > burn_in:
            out[it - burn_in - 1] = x
    return out, accepts / max(n_iter - burn_in, 1)


def rw_metropolis(log_target, x0, n_iter, burn_in, seed, delta0=0.1, target=0.3):
    """Adaptive random-walk Metropolis on a generic target; returns post-burn-in samples."""
    rng = np.random.Generator(np.random.Philox(seed))
    x = np.array(x0, dtype=float)
    lp = log_target(x)
    block = RandomWalkBlock(len(x), delta0, target)
    out = np.empty((max(n_iter - burn_in, 0), len(x)))
    for it in range(1, n_iter + 1):
        x, lp, _, alpha = rw_update(x, lp, log_target, block, rng)
        if it <= burn_in:
            block.adapt(alpha, x, it)
        else:
            out[it - burn_in - 1] = x
    return out


# -- the model sampler ------------------------------------------------------------
@dataclass
class ChainOutput:
    draws: PosteriorDraws | None
    trace: dict[str, np.ndarray]
    acceptance: dict[str, float]
    ess: dict[str, float]
    seed: int
    runtime_s: float
    iterations: int
    burn_in: int
    thin: int
    final_state: LatentState | None = None
    steps: dict[str, float] = field(default_factory=dict)


def scalar_block_layout(kind: str) -> dict[str, tuple[str, ...]]:
    """Scalar update blocks: ``"three"`` (count, sharing, GEV) or ``"joint"``,
    which updates the sharing and GEV scalars together because the GEV
    intercept and the effort offset trade off along a ridge."""
    if kind == "three":
        return dict(SCALAR_BLOCKS)
    if kind == "joint":
        return {"count": SCALAR_BLOCKS["count"], "location": SCALAR_BLOCKS["sharing"] + SCALAR_BLOCKS["gev"]}
    raise ValueError(f"scalar_blocks must be 'three' or 'joint', not {kind!r}")


class Sampler:
    """MALA-within-Gibbs over the model's blocks with a fixed sweep order."""

    def __init__(self, model: Model, config: ChainConfig, seed: int):
        self.model = model
        self.config = config
        self.seed = int(seed)
        self.field_blocks = [f for f in FIELDS if f in model.active_fields]
        self.block_defs = scalar_block_layout(config.scalar_blocks)
        self.scalar_blocks = [b for b, names in self.block_defs.items()
                              if any(n not in model.frozen_scalars for n in names)]
        self.hyper_blocks = list(self.field_blocks)
        names = ([f"field:{f}" for f in self.field_blocks] + [f"scalar:{b}" for b in self.scalar_blocks]
                 + [f"hyper:{f}" for f in self.hyper_blocks])
        self.block_names = names
        children = np.random.SeedSequence(self.seed).spawn(len(names))
        self.rngs = {n: np.random.Generator(np.random.Philox(c)) for n, c in zip(names, children)}
        self.delta = {f: config.delta_field for f in self.field_blocks}
        self.scalar_rw = {}
        for b in self.scalar_blocks:
            active = self.active_scalars(b)
            self.scalar_rw[b] = RandomWalkBlock(len(active), config.delta_scalar, config.target_rw,
                                                adapt_cov=config.adapt_scalar_cov)
        self.hyper_rw = {f: RandomWalkBlock(2, config.delta_hyper, config.target_rw, adapt_cov=False)
                         for f in self.hyper_blocks}
        self.factors: dict[str, VecchiaFactor] = {}
        self.nonfinite_gradients = 0

    def active_scalars(self, block):
        return [n for n in self.block_defs[block] if n not in self.model.frozen_scalars]

    # -- individual updates ---------------------------------------------------------
    def mala_step(self, state: LatentState, block: str, it: int, adapt: bool):
        model = self.model
        factor = self.factors[block]
        constrained = True
        precond = FieldPreconditioner(factor, constrained)

        def target(x):
            return model.block_log_posterior_grad(state.with_field(block, x), block, factor)

        x = state.fields[block]
        lp, g = target(x)
        if not np.all(np.isfinite(g)):
            self.nonfinite_gradients += 1
        res = mala_update(x, lp, g, target, self.delta[block], precond, self.rngs[f"field:{block}"])
        if adapt:
            self.delta[block] = adapt_step(self.delta[block], res.alpha, self.config.target_mala, it)
        if res.accepted:
            state = state.with_field(block, res.x - res.x.mean())
        return state, res.accepted

    def scalar_update(self, state: LatentState, block: str, it: int, adapt: bool):
        model = self.model
        names = self.active_scalars(block)
        terms = model.scalar_block_terms(block)

        def log_target(v):
            s = state.with_scalars(dict(zip(names, map(float, v))))
            lp = model.scalar_log_prior(s.scalars)
            if not np.isfinite(lp):
                return -np.inf
            return lp + sum(model.loglik_terms(s, terms).values())

        v = np.array([state.scalars[n] for n in names])
        rw = self.scalar_rw[block]
        v_new, _, accepted, alpha = rw_update(v, log_target(v), log_target, rw, self.rngs[f"scalar:{block}"])
        if adapt:
            rw.adapt(alpha, v_new, it)
        if accepted:
            state = state.with_scalars(dict(zip(names, map(float, v_new))))
        return state, accepted

    def hyper_update(self, state: LatentState, name: str, it: int, adapt: bool):
        model = self.model
        x = state.fields[name]
        cache = {}

        def log_target(v):
            h = GpHyper(float(np.exp(v[0])), float(np.exp(v[1])))
            try:
                f = model.factor(name, h)
            except FactorizationError:
                return -np.inf
            cache[tuple(v)] = f
            return model.field_log_prior(name, x, f) + model.hyper_log_prior(name, h) + v[0] + v[1]

        h = state.hyper[name]
        v = np.log([h.sd, h.range])
        lp = (model.field_log_prior(name, x, self.factors[name]) + model.hyper_log_prior(name, h)
              + v[0] + v[1])
        rw = self.hyper_rw[name]
        v_new, _, accepted, alpha = rw_update(v, lp, log_target, rw, self.rngs[f"hyper:{name}"])
        if adapt:
            rw.adapt(alpha, v_new, it)
        if accepted:
            state = state.with_hyper(name, GpHyper(float(np.exp(v_new[0])), float(np.exp(v_new[1]))))
            self.factors[name] = cache[tuple(v_new)]
        return state, accepted

    # -- driver -------------------------------------------------------------------------
    def initial_state(self) -> LatentState:
        state = self.model.initial_state()
        if self.config.warm_start:
            from .draws import PosteriorDraws
            warm = PosteriorDraws.read(self.config.warm_start)
            return warm.state(len(warm) - 1)
        return data_driven_start(self.model, state)

    def run(self, state: LatentState | None = None, progress=None) -> ChainOutput:
        cfg = self.config
        model = self.model
        if cfg.iterations < cfg.burn_in:
            raise ValueError("iterations must not be smaller than burn_in")
        state = (state or self.initial_state()).copy()
        for f in FIELDS:
            state.fields[f] = state.fields[f] - state.fields[f].mean()
        self.factors = model.factors(state)
        start = time.perf_counter()
        n_draws = cfg.n_draws
        recorded = []
        trace = {f"acc:{b}": np.zeros(cfg.iterations, dtype=np.int8) for b in self.block_names}
        trace.update({s: np.zeros(cfg.iterations) for s in SCALARS})
        trace["log_posterior"] = np.zeros(cfg.iterations)
        for it in range(1, cfg.iterations + 1):
            adapt = it <= cfg.horizon
            for kind, items, fn in (("field", self.field_blocks, self.mala_step),
                                    ("scalar", self.scalar_blocks, self.scalar_update),
                                    ("hyper", self.hyper_blocks, self.hyper_update)):
                for b in items:
                    name = f"{kind}:{b}"
                    try:
                        state, acc = fn(state, b, it, adapt)
                    except Exception as exc:  # noqa: BLE001 - re-raised with location
                        raise ChainError(f"iteration {it}, block {name}: {exc}") from exc
                    trace[f"acc:{name}"][it - 1] = acc
            for s in SCALARS:
                trace[s][it - 1] = state.scalars[s]
            trace["log_posterior"][it - 1] = model.joint_log_posterior(state, self.factors)
            if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                recorded.append(state.copy())
            if progress is not None:
                progress(it)
        runtime = time.perf_counter() - start
        assert len(recorded) == n_draws
        draws = PosteriorDraws.from_states(recorded, model.grid.years) if recorded else None
        post = slice(cfg.burn_in, cfg.iterations)
        acceptance = {b: float(trace[f"acc:{b}"][post].mean()) if cfg.iterations > cfg.burn_in else float("nan")
                      for b in self.block_names}
        from .diagnostics import ess as ess_fn
        ess = {}
        if draws is not None and len(draws) >= 10:
            for s in SCALARS:
                if s in model.frozen_scalars:
                    continue
                ess[s] = ess_fn(draws.scalars[s])[0]
        for b, a in acceptance.items():
            if not 0.1 <= a <= 0.9:
                log.warning("block %s acceptance rate %.3f outside [0.1, 0.9]", b, a)
        steps = {f"field:{f}": d for f, d in self.delta.items()}
        steps.update({f"scalar:{b}": rw.delta for b, rw in self.scalar_rw.items()})
        steps.update({f"hyper:{b}": rw.delta for b, rw in self.hyper_rw.items()})
        return ChainOutput(draws, trace, acceptance, ess, self.seed, runtime, cfg.iterations,
                           cfg.burn_in, cfg.thin, state, steps)


def run_chain(model: Model, config: ChainConfig, seed: int, state: LatentState | None = None,
              progress=None) -> ChainOutput:
    return Sampler(model, config, seed).run(state, progress)

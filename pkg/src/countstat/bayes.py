"""Flat-prior Bayesian upper limits with marginalized nuisance parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .core import GAMMA_FROM_COUNT, CountStatError, CountingModel, Nuisance, as_observation, log_poisson_pmf
from .frequentist import IntervalResult

N_QUAD = 64
N_GRID = 4001
QUAD_HALF_WIDTH = 8.0
TAIL_FRACTION = 1e-4


class DivergentPosteriorError(CountStatError):
    pass


@dataclass(frozen=True)
class PosteriorDensity:
    s_grid: np.ndarray
    density: np.ndarray
    normalized: bool
    divergent: bool
    reason: str = ""

    def cdf(self) -> np.ndarray:
        if self.divergent:
            raise DivergentPosteriorError(self.reason)
        ds = np.diff(self.s_grid)
        steps = 0.5 * ds * (self.density[1:] + self.density[:-1])
        return np.concatenate([[0.0], np.cumsum(steps)])

    def quantile(self, q: float) -> float:
        cdf = self.cdf()
        return float(np.interp(q, cdf, self.s_grid))


def nuisance_nodes(nuis: Nuisance, aux) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and log-weights for a nuisance given its subsidiary result.

    Gauss-Legendre on the central +-8 sigma of the nuisance density (clipped
    at zero); weights are renormalized to unit total.
    """
    if nuis.exact:
        return np.array([nuis.mean]), np.array([0.0])
    if nuis.form == GAMMA_FROM_COUNT and aux == 0:
        # Gamma(shape -> 0) collapses onto zero
        return np.array([0.0]), np.array([0.0])
    dist = nuis.prior(aux)
    mean, sd = float(dist.mean()), float(dist.std())
    lo = max(0.0, mean - QUAD_HALF_WIDTH * sd)
    hi = mean + QUAD_HALF_WIDTH * sd
    x, w = np.polynomial.legendre.leggauss(N_QUAD)
    nodes = lo + 0.5 * (hi - lo) * (x + 1)
    with np.errstate(divide="ignore"):
        logw = np.log(0.5 * (hi - lo) * w) + dist.logpdf(nodes)
    logw -= special.logsumexp(logw)
    return nodes, logw


def _s_max(model: CountingModel, n: int, eff_nodes) -> float:
    r = model.eff_rel_sigma
    e, le = eff_nodes
    w = np.exp(le)
    mean = float(np.sum(w * e))
    sd = math.sqrt(max(float(np.sum(w * (e - mean) ** 2)), 0.0))
    # low-efficiency toys push the posterior to larger s
    eff_lo = max(mean - 3 * sd, 0.25 * mean)
    return max(50.0, (n + 10 * math.sqrt(n) + 10 * (1 + r)) / eff_lo)


def _log_marginal(n: int, s: np.ndarray, eff_nodes, b_nodes) -> np.ndarray:
    """log of sum_jl w_j v_l Poisson(n; eff_j s + b_l) on the signal grid."""
    e, le = eff_nodes
    b, lb = b_nodes
    mu = s[:, None, None] * e[None, :, None] + b[None, None, :]
    terms = log_poisson_pmf(n, mu) + le[None, :, None] + lb[None, None, :]
    return special.logsumexp(terms.reshape(len(s), -1), axis=1)


def _tail_decays(model: CountingModel, obs, s_ref: float) -> bool:
    """Whether ``s * posterior(s)`` decays as ``s`` grows without bound.

    Substituting ``u = eff * s``, ``s * p(s) = int Poisson(n; u + b) pi(u/s) du``,
    which tends to ``pi(0) * const``: any efficiency density that does not
    vanish at zero gives a non-normalizable posterior.
    """
    eff = model.efficiency
    if eff.exact:
        return True
    dist = eff.prior(obs.eff_aux)
    b, lb = nuisance_nodes(model.background, obs.b_aux)
    n = obs.n
    u_hi = n + 30 * math.sqrt(n + 1) + 30
    x, w = np.polynomial.legendre.leggauss(200)
    u = 0.5 * u_hi * (x + 1)
    lw = np.log(0.5 * u_hi * w)
    base = log_poisson_pmf(n, u[:, None] + b[None, :]) + lb[None, :] + lw[:, None]
    log_g = []
    for s in s_ref * 10.0 ** np.arange(3, 7):
        with np.errstate(divide="ignore"):
            lp = dist.logpdf(u / s)
        log_g.append(special.logsumexp(base + lp[:, None]))
    log_g = np.array(log_g)
    if not np.isfinite(log_g[-1]):
        return True
    return bool(log_g[-1] - log_g[-2] < math.log(0.5))


def posterior(model: CountingModel, obs, s_max: float | None = None) -> PosteriorDensity:
    """Posterior density for ``s`` under a flat prior on ``s >= 0``."""
    obs = as_observation(model, obs)
    reason = (
        f"posterior for s diverges: flat prior on s with {model.eff_form} efficiency"
        " prior (density non-zero at eff = 0) is not normalizable"
    )
    if model.eff_form == GAMMA_FROM_COUNT and obs.eff_aux == 0:
        why = "posterior for s diverges: efficiency subsidiary count is 0, so eff = 0 is not excluded"
        return PosteriorDensity(np.array([0.0]), np.array([1.0]), False, True, why)
    eff_nodes = nuisance_nodes(model.efficiency, obs.eff_aux)
    b_nodes = nuisance_nodes(model.background, obs.b_aux)
    s_max = _s_max(model, obs.n, eff_nodes) if s_max is None else s_max

    divergent = False
    for attempt in range(3):
        s = np.linspace(0.0, s_max, N_GRID)
        logd = _log_marginal(obs.n, s, eff_nodes, b_nodes)
        dens = np.exp(logd - logd.max())
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(s) * (dens[1:] + dens[:-1]))])
        total = cdf[-1]
        # mass in the last tenth of the grid
        tail = total - np.interp(0.9 * s_max, s, cdf)
        if tail <= TAIL_FRACTION * total:
            break
        if attempt == 2:
            divergent = True
        else:
            s_max *= 2
    if not divergent and not _tail_decays(model, obs, s_max):
        divergent = True
    if divergent:
        return PosteriorDensity(s, dens, False, True, reason)
    return PosteriorDensity(s, dens / total, True, False, "")


@lru_cache(maxsize=16384)
def _upper_limit(model: CountingModel, obs, cl: float) -> IntervalResult:
    post = posterior(model, obs)
    if post.divergent:
        raise DivergentPosteriorError(post.reason)
    return IntervalResult(0.0, post.quantile(cl), cl, "bayes")


def upper_limit(model: CountingModel, obs, cl: float) -> IntervalResult:
    """Smallest ``s_up`` with posterior probability ``cl`` below it."""
    if not 0 < cl < 1:
        raise ValueError(f"credibility level must be in (0, 1), got {cl}")
    return _upper_limit(model, as_observation(model, obs), float(cl))

"""Profile likelihood for the signal and the Delta(ln L) interval rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .core import CountStatError, CountingModel, Observation, as_observation, log_likelihood
from .frequentist import IntervalResult

GRAD_TOL = 1e-8
N_RESTARTS = 4


class ProfileError(CountStatError):
    def __init__(self, s: float, message: str):
        super().__init__(f"profile maximization failed at s={s:g}: {message}")
        self.s = s


def _eff_bounds(model: CountingModel, obs: Observation) -> tuple[float, float]:
    eff = model.efficiency
    est = max(eff.estimate(obs.eff_aux), 1e-3 * eff.mean)
    return math.log(1e-6 * eff.mean), math.log(est + 30 * eff.sigma + 1.0)


def _b_bounds(model: CountingModel, obs: Observation, s: float) -> tuple[float, float]:
    b = model.background
    est = b.estimate(obs.b_aux)
    return 0.0, est + 30 * b.sigma + obs.n + 10.0


def profile_point(model: CountingModel, obs: Observation, s: float) -> tuple[float, float, float]:
    """Maximize the likelihood over the nuisances at fixed ``s``.

    Returns ``(lnL, b_best, eff_best)``. The efficiency is optimized in
    log coordinates so it stays positive.
    """
    b_nuis, e_nuis = model.background, model.efficiency
    if b_nuis.exact and e_nuis.exact:
        return float(log_likelihood(model, obs, s)), b_nuis.mean, e_nuis.mean

    if b_nuis.exact:
        lo, hi = _eff_bounds(model, obs)
        f = lambda t: -log_likelihood(model, obs, s, eff=math.exp(t))
        res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-10})
        if not res.success or not np.isfinite(res.fun):
            raise ProfileError(s, res.message)
        return -float(res.fun), b_nuis.mean, math.exp(res.x)

    if e_nuis.exact:
        lo, hi = _b_bounds(model, obs, s)
        f = lambda b: -log_likelihood(model, obs, s, b=b)
        res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-10})
        # the bounded search never evaluates the boundary itself
        best = min((res.fun, res.x), (f(0.0), 0.0))
        if not np.isfinite(best[0]):
            raise ProfileError(s, "likelihood is zero everywhere")
        return -float(best[0]), best[1], e_nuis.mean

    t_lo, t_hi = _eff_bounds(model, obs)
    b_lo, b_hi = _b_bounds(model, obs, s)

    def neg(x):
        v = -log_likelihood(model, obs, s, b=x[1], eff=math.exp(x[0]))
        return v if np.isfinite(v) else 1e300

    t0 = math.log(max(e_nuis.estimate(obs.eff_aux), 1e-3 * e_nuis.mean))
    b0 = b_nuis.estimate(obs.b_aux)
    starts = [(t0, b0), (t0, max(obs.n - e_nuis.mean * s, 0.0)), (t0 - 0.5, b0), (t0, 0.5 * b0)]
    best = None
    # restart only when a start fails to converge
    for x0 in starts[:N_RESTARTS]:
        x0 = (min(max(x0[0], t_lo), t_hi), min(max(x0[1], b_lo), b_hi))
        res = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=[(t_lo, t_hi), (b_lo, b_hi)],
                                options={"gtol": GRAD_TOL, "ftol": 1e-15})
        if best is None or res.fun < best.fun:
            best = res
        if res.success and res.fun < 1e300:
            break
    if best.fun >= 1e300:
        raise ProfileError(s, best.message)
    return -float(best.fun), float(best.x[1]), math.exp(best.x[0])


@dataclass(frozen=True)
class ProfileCurve:
    s_grid: np.ndarray
    lnL_prof: np.ndarray
    s_hat: float
    lnL_max: float
    model: CountingModel = field(repr=False)
    obs: Observation = field(repr=False)

    def at(self, s: float) -> float:
        return profile_point(self.model, self.obs, s)[0]


def default_grid(model: CountingModel, n: int) -> np.ndarray:
    s_max = max(10.0, (n + 6 * math.sqrt(n) + 10) / model.eff_mean)
    return np.linspace(0.0, s_max, 201)


def profile(model: CountingModel, obs, s_grid=None) -> ProfileCurve:
    obs = as_observation(model, obs)
    s_grid = default_grid(model, obs.n) if s_grid is None else np.asarray(s_grid, dtype=float)
    values = np.array([profile_point(model, obs, float(s))[0] for s in s_grid])
    if not np.all(np.isfinite(values) | (values == -np.inf)):
        raise ProfileError(float(s_grid[np.argmax(~np.isfinite(values))]), "non-finite value")
    i = int(np.argmax(values))
    s_hat, lnl_max = float(s_grid[i]), float(values[i])
    lo = float(s_grid[max(i - 1, 0)])
    hi = float(s_grid[min(i + 1, len(s_grid) - 1)])
    if hi > lo:
        res = optimize.minimize_scalar(lambda s: -profile_point(model, obs, s)[0],
                                       bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-10})
        if -res.fun > lnl_max:
            s_hat, lnl_max = float(res.x), -float(res.fun)
    return ProfileCurve(s_grid, values, s_hat, lnl_max, model, obs)


def delta_cl(delta: float) -> float:
    """Coverage that Wilks' theorem attaches to a Delta(ln L) threshold."""
    return float(stats.chi2.cdf(2 * delta, 1))


def delta_lnL_interval(curve: ProfileCurve, delta: float = 0.5, cl_equiv: float | None = None,
                       xtol: float = 1e-12) -> IntervalResult:
    """``{s >= 0 : lnL_prof(s) >= lnL_max - delta}``, endpoints included."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    cl = delta_cl(delta) if cl_equiv is None else cl_equiv
    threshold = curve.lnL_max - delta
    g = lambda s: curve.at(s) - threshold

    if g(0.0) >= 0:
        lower = 0.0
    else:
        lower = optimize.brentq(g, 0.0, curve.s_hat, xtol=xtol)

    s_hi = float(curve.s_grid[-1])
    for _ in range(3):
        if g(s_hi) < 0:
            break
        s_hi *= 2
    else:
        raise CountStatError(
            f"upper Delta(lnL)={delta} crossing lies beyond s={s_hi / 2:g} after two extensions"
        )
    upper = optimize.brentq(g, curve.s_hat, s_hi, xtol=xtol)
    return IntervalResult(lower, max(upper, lower), cl, f"profile-dlnl-{delta:g}")


def profile_interval(model: CountingModel, obs, delta: float = 0.5) -> IntervalResult:
    return delta_lnL_interval(profile(model, obs), delta)

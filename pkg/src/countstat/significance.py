"""Discovery p-values, p-value combination, CLs and sensitivity estimates.

The default test statistic is the observed count itself: large counts are
evidence against the background-only hypothesis, so every tail here is an
upper tail ``P(N >= n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .core import (
    GAMMA_FROM_COUNT,
    CountStatError,
    CountingModel,
    ModelError,
    PValueReport,
    as_observation,
    log_poisson_pmf,
    log_poisson_sf,
    poisson_cdf,
    poisson_sf,
)

STRATEGIES = (
    "plug-in",
    "prior-predictive",
    "posterior-predictive",
    "supremum",
    "ci-adjusted",
    "conditioning",
)
COMBINATION_RULES = ("min", "product")
DEFAULT_GAMMA = 1e-8
EXCLUSION_CLS = 0.05


def _tail(n: int, mu):
    """Vectorized ``P(N >= n | mu)``."""
    mu = np.asarray(mu, dtype=float)
    if n <= 0:
        return np.ones_like(mu)
    return special.gammainc(n, mu)


def pvalue_counting(n_obs: int, b: float) -> PValueReport:
    """Probability of ``n_obs`` or more counts from background ``b`` alone."""
    if n_obs < 0 or int(n_obs) != n_obs:
        raise ValueError(f"observed count must be a non-negative integer, got {n_obs}")
    if b < 0:
        raise ValueError(f"background must be >= 0, got {b}")
    return PValueReport(math.exp(log_poisson_sf(int(n_obs), float(b))), "counting")


def _nodes(model: CountingModel, aux):
    from .bayes import nuisance_nodes

    return nuisance_nodes(model.background, aux)


def pvalue_nuisance(obs, model: CountingModel, strategy: str, *, b_range=None,
                    gamma: float = DEFAULT_GAMMA, tau: float | None = None) -> PValueReport:
    """Background-only p-value when the background is itself uncertain.

    ``plug-in`` uses the subsidiary estimate of ``b``; ``prior-predictive``
    averages the tail over the density of ``b`` given the subsidiary result;
    ``posterior-predictive`` averages it over the posterior of ``b`` that also
    uses the main count; ``supremum`` takes the largest tail over
    ``b_range``; ``ci-adjusted`` adds ``gamma`` to that supremum, with
    ``b_range`` defaulting to the central ``1 - gamma`` interval of ``b``;
    ``conditioning`` conditions on the total count ``n + m`` and uses the
    binomial tail with ``p = 1 / (1 + tau)``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    obs = as_observation(model, obs)
    n = obs.n
    bkg = model.background

    if strategy == "conditioning":
        if bkg.form != GAMMA_FROM_COUNT or obs.b_aux is None:
            raise ModelError("conditioning needs a gamma-from-count background subsidiary count")
        t = tau if tau is not None else (model.tau if model.tau is not None else bkg.rate)
        m = int(obs.b_aux)
        if n == 0:
            return PValueReport(1.0, strategy)
        p = float(stats.binom.sf(n - 1, n + m, 1.0 / (1.0 + t)))
        return PValueReport(min(p, 1.0), strategy)

    if bkg.exact:
        if strategy in ("supremum", "ci-adjusted") and b_range is None:
            b_range = (bkg.mean, bkg.mean)
        elif strategy not in ("supremum", "ci-adjusted"):
            return PValueReport(pvalue_counting(n, bkg.mean).p, strategy)

    if strategy == "plug-in":
        return PValueReport(pvalue_counting(n, bkg.estimate(obs.b_aux)).p, strategy)

    if strategy in ("prior-predictive", "posterior-predictive"):
        b, logw = _nodes(model, obs.b_aux)
        if strategy == "posterior-predictive":
            logw = logw + log_poisson_pmf(n, b)
            logw = logw - special.logsumexp(logw)
        p = float(np.sum(np.exp(logw) * _tail(n, b)))
        return PValueReport(min(max(p, 0.0), 1.0), strategy)

    if strategy == "ci-adjusted" and b_range is None:
        b_range = tuple(float(v) for v in bkg.prior(obs.b_aux).interval(1.0 - gamma))
    if b_range is None:
        raise ModelError("supremum needs a bounded background range b_range=(lo, hi)")
    lo, hi = (float(v) for v in b_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or hi < lo:
        raise ModelError(f"background range must be bounded and non-negative, got {b_range}")
    # the tail grows with b, but scan a grid so the rule does not rely on it
    grid = np.linspace(lo, hi, 201)
    p = float(np.max(_tail(n, grid)))
    if strategy == "ci-adjusted":
        p += gamma
    return PValueReport(min(p, 1.0), strategy)


def combine_pvalues(ps, rule: str) -> PValueReport:
    """Combine independent p-values with a rule chosen in advance.

    ``min``: probability that the smallest of ``k`` uniforms is below the
    smallest observed p. ``product``: probability that the product of ``k``
    uniforms is below the observed product.
    """
    if rule not in COMBINATION_RULES:
        raise ValueError(f"a combination rule must be given: one of {COMBINATION_RULES}")
    ps = np.asarray(list(ps), dtype=float)
    if ps.size == 0:
        raise ValueError("cannot combine an empty list of p-values")
    if ps.size < 2:
        raise ValueError("combination needs at least two p-values")
    if np.any((ps <= 0) | (ps > 1)):
        raise ValueError(f"p-values must lie in (0, 1], got {ps.tolist()}")
    k = ps.size
    if rule == "min":
        p = -math.expm1(k * math.log1p(-float(ps.min()))) if ps.min() < 1 else 1.0
    else:
        log_x = float(np.sum(np.log(ps)))
        if log_x == 0.0:
            p = 1.0
        else:
            # x * sum_{j<k} (-ln x)^j / j!  is the upper regularized gamma Q(k, -ln x)
            p = float(special.gammaincc(k, -log_x))
    return PValueReport(min(p, 1.0), f"combine-{rule}")


def cls(p0: float, p1: float) -> float:
    """``(1 - p1) / (1 - p0)``."""
    for name, p in (("p0", p0), ("p1", p1)):
        if not 0 <= p <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if p0 >= 1:
        raise CountStatError("no H0 sensitivity: p0 = 1 makes CLs undefined")
    return (1.0 - p1) / (1.0 - p0)


@dataclass(frozen=True)
class CLsResult:
    value: float
    clsb: float
    clb: float
    excluded: bool

    def __float__(self):
        return self.value


def cls_counting(n: int, b: float, s: float, eff: float = 1.0,
                 threshold: float = EXCLUSION_CLS) -> CLsResult:
    """CLs for the count statistic; small counts disfavour the signal."""
    if s < 0 or b < 0:
        raise ValueError("signal and background must be non-negative")
    clsb = poisson_cdf(n, eff * s + b)
    clb = poisson_cdf(n, b)
    if clb <= 0:
        raise CountStatError("no H0 sensitivity: P(n <= n_obs | b) = 0 makes CLs undefined")
    # ratio of the cdfs directly; 1 - (1 - x) loses digits
    value = clsb / clb
    return CLsResult(value, clsb, clb, value <= threshold)


def cls_upper_limit(n: int, b: float, cl: float = 0.90, eff: float = 1.0) -> float:
    """Signal where CLs falls to ``1 - cl``."""
    if not 0 < cl < 1:
        raise ValueError(f"confidence level must be in (0, 1), got {cl}")
    target = 1.0 - cl
    f = lambda s: cls_counting(n, b, s, eff).value - target
    hi = max(1.0, (n + 5 * math.sqrt(n + 1) + 5) / eff)
    while f(hi) > 0:
        hi *= 2
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-12))


@dataclass(frozen=True)
class HypoStatDist:
    """Distribution of a statistic under H0 and under H1.

    For the count statistic ``values`` are counts and ``h0``/``h1`` are pmfs.
    For sample-based statistics they are the two sorted samples.
    """

    values: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    labels: tuple[str, str] = ("H0", "H1")
    kind: str = "pmf"

    def __post_init__(self):
        if self.kind == "pmf":
            for name, pmf in (("H0", self.h0), ("H1", self.h1)):
                if abs(float(np.sum(pmf)) - 1.0) > 1e-8:
                    raise ValueError(f"{name} pmf sums to {np.sum(pmf)}, not 1")

    @classmethod
    def counting(cls, model: CountingModel, s: float) -> HypoStatDist:
        mu1 = float(model.mean(s))
        mu0 = model.b_mean
        n_max = int(math.ceil(mu1 + 15 * math.sqrt(mu1 + 1) + 30))
        n = np.arange(n_max + 1)
        h0 = np.exp(log_poisson_pmf(n, mu0))
        h1 = np.exp(log_poisson_pmf(n, mu1))
        return cls(n, h0, h1, (f"b={mu0:g}", f"s={s:g}"))

    @classmethod
    def from_samples(cls, t0, t1, labels=("H0", "H1")) -> HypoStatDist:
        return cls(np.array([]), np.sort(np.asarray(t0, float)), np.sort(np.asarray(t1, float)),
                   labels, kind="samples")

    def tail(self, t: float, which: str = "h0") -> float:
        """``P(T >= t)`` under the chosen hypothesis."""
        dist = getattr(self, which)
        if self.kind == "pmf":
            return float(np.sum(dist[self.values >= t]))
        return float(np.mean(dist >= t))


@dataclass(frozen=True)
class SensitivityResult:
    b: float
    eff: float
    alpha: float
    cl: float
    t_crit: int
    alpha_actual: float = field(init=False)
    s_min: float = 0.0
    power: float = field(init=False)

    def __post_init__(self):
        a = poisson_sf(self.t_crit, self.b)
        pw = poisson_sf(self.t_crit, self.b + self.eff * self.s_min)
        if a > self.alpha:
            raise CountStatError(f"critical count {self.t_crit} has tail {a} > alpha {self.alpha}")
        if pw < self.cl * (1 - 1e-9):
            raise CountStatError(f"power {pw} at s_min={self.s_min} below required {self.cl}")
        object.__setattr__(self, "alpha_actual", a)
        object.__setattr__(self, "power", pw)


def critical_count(b: float, alpha: float) -> int:
    """Smallest ``k`` with ``P(N >= k | b) <= alpha``."""
    k = int(max(0, math.floor(b)))
    while poisson_sf(k, b) > alpha:
        k += 1
    while k > 0 and poisson_sf(k - 1, b) <= alpha:
        k -= 1
    return k


def punzi_sensitivity(model: CountingModel, alpha: float, cl: float) -> SensitivityResult:
    """Smallest signal that reaches ``t_crit`` with probability at least ``cl``.

    Uses the nominal background and efficiency. With ``b = 0`` a single
    count is already significant, so ``t_crit = 1``.
    """
    if not 0 < alpha <= 0.1:
        raise ValueError(f"alpha must be in (0, 0.1], got {alpha}")
    if not 0.5 < cl < 1:
        raise ValueError(f"power requirement must be in (0.5, 1), got {cl}")
    b, eff = model.b_mean, model.eff_mean
    t_crit = max(critical_count(b, alpha), 1)
    power = lambda s: poisson_sf(t_crit, b + eff * s) - cl
    if power(0.0) >= 0:
        s_min = 0.0
    else:
        hi = max(1.0, (t_crit + 10 * math.sqrt(t_crit) + 10) / eff)
        while power(hi) < 0:
            hi *= 2
        s_min = float(optimize.brentq(power, 0.0, hi, xtol=1e-12, rtol=1e-14))
        # brentq may land a hair below the root
        while power(s_min) < 0:
            s_min = math.nextafter(s_min, math.inf)
    return SensitivityResult(b, eff, alpha, cl, t_crit, s_min=s_min)


def median_sensitivity(model: CountingModel, cl: float, n_toys: int, seed: int,
                       method: str = "bayes") -> float:
    """Median upper limit over background-only toys.

    ``n_toys`` must be odd so the median is a single order statistic.
    Divergent posteriors give an infinite limit for that toy.
    """
    from .coverage import draw_toys, upper_limit_fn

    if n_toys < 1 or n_toys % 2 == 0:
        raise ValueError(f"n_toys must be a positive odd number, got {n_toys}")
    limit = upper_limit_fn(method, model, cl)
    toys = draw_toys(model, 0.0, n_toys, seed)
    uppers = np.array([limit(obs) for obs in toys.observations()])
    return float(np.median(uppers))

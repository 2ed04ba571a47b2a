"""Counting-experiment model, Poisson likelihoods and p-value/sigma conversion.

The observed count ``n`` is Poisson distributed with mean ``eff * s + b``.
Both the background ``b`` and the efficiency ``eff`` may carry an
uncertainty backed by a subsidiary measurement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

EXACT = "exact"
GAMMA_FROM_COUNT = "gamma-from-count"
TRUNCATED_GAUSSIAN = "truncated-gaussian"
SUBSIDIARY_FORMS = (EXACT, GAMMA_FROM_COUNT, TRUNCATED_GAUSSIAN)


class CountStatError(Exception):
    """Base class for computation errors raised by this package."""


class ModelError(CountStatError, ValueError):
    """Invalid model or observation."""


def log_poisson_pmf(n, mu):
    """Log of the Poisson probability, broadcasting over ``n`` and ``mu``.

    ``mu == 0`` gives 0 for ``n == 0`` and ``-inf`` otherwise.
    """
    n = np.asarray(n)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError(f"Poisson mean must be >= 0, got {mu.min()}")
    if np.any(n < 0):
        raise ValueError("Poisson count must be >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = special.xlogy(n, mu) - mu - special.gammaln(n + 1.0)
    return out if out.ndim else float(out)


def poisson_pmf(n, mu):
    out = np.exp(log_poisson_pmf(n, mu))
    return out if np.ndim(out) else float(out)


def log_poisson_sf(n: int, mu: float) -> float:
    """log P(N >= n | mu), summed term by term in log space."""
    if mu < 0:
        raise ValueError(f"Poisson mean must be >= 0, got {mu}")
    if n <= 0:
        return 0.0
    if mu == 0:
        return -math.inf
    if n > mu:
        # terms fall off geometrically past the mode
        width = int(40 + 40 * math.sqrt(mu) + 0.5 * n)
        k = np.arange(n, n + width)
        return float(special.logsumexp(log_poisson_pmf(k, mu)))
    low = float(special.logsumexp(log_poisson_pmf(np.arange(0, n), mu)))
    return math.log(-math.expm1(low)) if low < 0 else -math.inf


def poisson_sf(n: int, mu: float) -> float:
    """P(N >= n | mu)."""
    return math.exp(log_poisson_sf(n, mu))


def poisson_cdf(n: int, mu: float) -> float:
    """P(N <= n | mu)."""
    if n < 0:
        return 0.0
    if mu == 0:
        return 1.0
    if n + 1 > mu:
        return -math.expm1(log_poisson_sf(n + 1, mu))
    return float(np.exp(special.logsumexp(log_poisson_pmf(np.arange(0, n + 1), mu))))


def sigma_to_p(z):
    """One-sided upper Gaussian tail probability beyond ``z`` standard deviations."""
    z = np.asarray(z, dtype=float)
    p = 0.5 * special.erfc(z / math.sqrt(2.0))
    return p if p.ndim else float(p)


def p_to_sigma(p):
    """Inverse of :func:`sigma_to_p`; negative for ``p > 0.5``, ``-inf`` at ``p == 1``."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError(f"p-value must lie in (0, 1], got {p}")
    z = -special.ndtri(p)
    return z if z.ndim else float(z)


@dataclass(frozen=True)
class PValueReport:
    p: float
    method: str
    sided: str = "one-sided-upper"
    sigma_equiv: float = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p-value out of range: {self.p}")
        # reported significance is floored at zero: p >= 0.5 is "no excess"
        if self.p == 0.0:
            z = math.inf
        elif self.p >= 0.5:
            z = 0.0
        else:
            z = p_to_sigma(self.p)
        object.__setattr__(self, "sigma_equiv", z)


@dataclass(frozen=True)
class Nuisance:
    """A nuisance parameter with nominal value ``mean`` and relative uncertainty.

    ``gamma-from-count``: the subsidiary measurement is a count
    ``m ~ Poisson(k * theta / mean)`` with ``k = 1 / rel_sigma**2``; given
    ``m`` the nuisance has density Gamma(shape=m, rate=k/mean), which for the
    nominal ``m = k`` has mean ``mean`` and relative width ``rel_sigma``.

    ``truncated-gaussian``: the subsidiary measurement is a Gaussian estimate
    ``x ~ N(theta, rel_sigma * mean)``; the density is that Gaussian truncated
    to ``theta >= 0``.
    """

    name: str
    mean: float
    rel_sigma: float = 0.0
    form: str = EXACT

    def __post_init__(self):
        if self.form not in SUBSIDIARY_FORMS:
            raise ModelError(f"{self.name}: unknown subsidiary form {self.form!r}")
        if self.rel_sigma < 0 or not math.isfinite(self.rel_sigma):
            raise ModelError(f"{self.name}: relative sigma must be >= 0, got {self.rel_sigma}")
        if (self.form == EXACT) != (self.rel_sigma == 0):
            raise ModelError(
                f"{self.name}: form {self.form!r} inconsistent with rel_sigma={self.rel_sigma}"
            )
        if self.form == GAMMA_FROM_COUNT:
            if self.mean <= 0:
                raise ModelError(f"{self.name}: gamma-from-count needs a positive mean")
            k = round(1.0 / self.rel_sigma**2)
            if k < 1 or abs(k * self.rel_sigma**2 - 1.0) > 1e-6:
                raise ModelError(
                    f"{self.name}: gamma-from-count needs rel_sigma = 1/sqrt(k) for integer k,"
                    f" got {self.rel_sigma}"
                )

    @property
    def exact(self) -> bool:
        return self.form == EXACT

    @property
    def sigma(self) -> float:
        return self.rel_sigma * self.mean

    @property
    def k(self) -> int:
        """Nominal subsidiary count for ``gamma-from-count``."""
        if self.form != GAMMA_FROM_COUNT:
            raise ModelError(f"{self.name}: no subsidiary count for form {self.form!r}")
        return round(1.0 / self.rel_sigma**2)

    @property
    def rate(self) -> float:
        """Expected subsidiary count per unit of the nuisance (``tau`` for b)."""
        return self.k / self.mean

    def nominal_aux(self):
        if self.form == GAMMA_FROM_COUNT:
            return self.k
        if self.form == TRUNCATED_GAUSSIAN:
            return self.mean
        return None

    def estimate(self, aux) -> float:
        if self.form == GAMMA_FROM_COUNT:
            return aux / self.rate
        if self.form == TRUNCATED_GAUSSIAN:
            return max(float(aux), 0.0)
        return self.mean

    def prior(self, aux):
        """Frozen scipy distribution of the nuisance given its subsidiary result."""
        if self.form == GAMMA_FROM_COUNT:
            return stats.gamma(a=aux, scale=1.0 / self.rate)
        if self.form == TRUNCATED_GAUSSIAN:
            a = -aux / self.sigma
            return stats.truncnorm(a, math.inf, loc=aux, scale=self.sigma)
        raise ModelError(f"{self.name}: exact nuisance has no prior")

    def log_aux_likelihood(self, theta, aux):
        """Log-likelihood of the subsidiary measurement at nuisance value ``theta``."""
        if self.form == GAMMA_FROM_COUNT:
            return log_poisson_pmf(aux, self.rate * np.asarray(theta))
        if self.form == TRUNCATED_GAUSSIAN:
            return stats.norm.logpdf(aux, loc=theta, scale=self.sigma)
        return 0.0

    def sample_aux(self, rng: np.random.Generator, size=None, true_value=None):
        theta = self.mean if true_value is None else true_value
        if self.form == GAMMA_FROM_COUNT:
            return rng.poisson(self.rate * theta, size=size)
        if self.form == TRUNCATED_GAUSSIAN:
            return rng.normal(theta, self.sigma, size=size)
        return None


def _default_form(rel_sigma: float) -> str:
    return EXACT if rel_sigma == 0 else GAMMA_FROM_COUNT


@dataclass(frozen=True)
class CountingModel:
    """Poisson counting experiment with mean ``eff * s + b``."""

    b_mean: float = 0.0
    b_rel_sigma: float = 0.0
    eff_mean: float = 1.0
    eff_rel_sigma: float = 0.0
    b_form: str | None = None
    eff_form: str | None = None
    tau: float | None = None

    def __post_init__(self):
        if not (self.b_mean >= 0 and math.isfinite(self.b_mean)):
            raise ModelError(f"b_mean must be >= 0, got {self.b_mean}")
        if not (self.eff_mean > 0 and math.isfinite(self.eff_mean)):
            raise ModelError(f"eff_mean must be > 0, got {self.eff_mean}")
        if self.b_form is None:
            object.__setattr__(self, "b_form", _default_form(self.b_rel_sigma))
        if self.eff_form is None:
            object.__setattr__(self, "eff_form", _default_form(self.eff_rel_sigma))
        if self.tau is not None and not self.tau > 0:
            raise ModelError(f"tau must be > 0, got {self.tau}")
        # validates the nuisance specifications
        self.background, self.efficiency

    @property
    def background(self) -> Nuisance:
        return Nuisance("b", self.b_mean, self.b_rel_sigma, self.b_form)

    @property
    def efficiency(self) -> Nuisance:
        return Nuisance("eff", self.eff_mean, self.eff_rel_sigma, self.eff_form)

    @property
    def nuisance_free(self) -> bool:
        return self.background.exact and self.efficiency.exact

    def mean(self, s, b=None, eff=None):
        b = self.b_mean if b is None else b
        eff = self.eff_mean if eff is None else eff
        return eff * np.asarray(s) + b

    def observation(self, n: int, b_aux=None, eff_aux=None) -> Observation:
        """Observation with subsidiary results defaulting to their nominal values."""
        if b_aux is None:
            b_aux = self.background.nominal_aux()
        if eff_aux is None:
            eff_aux = self.efficiency.nominal_aux()
        obs = Observation(n, b_aux=b_aux, eff_aux=eff_aux)
        self.check(obs)
        return obs

    def check(self, obs: Observation) -> None:
        for nuis, aux in ((self.background, obs.b_aux), (self.efficiency, obs.eff_aux)):
            if nuis.exact and aux is not None:
                raise ModelError(f"{nuis.name} is exact but a subsidiary result was given")
            if not nuis.exact and aux is None:
                raise ModelError(f"{nuis.name} is uncertain but no subsidiary result was given")
            if nuis.form == GAMMA_FROM_COUNT and (aux < 0 or int(aux) != aux):
                raise ModelError(f"{nuis.name} subsidiary count must be a non-negative integer")


@dataclass(frozen=True)
class Observation:
    """Main count plus subsidiary results.

    ``b_aux``/``eff_aux`` hold the subsidiary count (gamma-from-count) or the
    Gaussian estimate (truncated-gaussian); ``None`` for exact nuisances.
    """

    n: int
    b_aux: float | int | None = None
    eff_aux: float | int | None = None

    def __post_init__(self):
        if self.n < 0 or int(self.n) != self.n:
            raise ModelError(f"observed count must be a non-negative integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))


def as_observation(model: CountingModel, obs) -> Observation:
    if isinstance(obs, Observation):
        model.check(obs)
        return obs
    return model.observation(int(obs))


def log_likelihood(model: CountingModel, obs, s, b=None, eff=None):
    """Full log-likelihood: main Poisson term plus subsidiary terms."""
    obs = as_observation(model, obs)
    if np.any(np.asarray(s) < 0):
        raise ValueError("signal must be >= 0")
    b = model.b_mean if b is None else b
    eff = model.eff_mean if eff is None else eff
    out = log_poisson_pmf(obs.n, model.mean(s, b, eff))
    if not model.background.exact:
        out = out + model.background.log_aux_likelihood(b, obs.b_aux)
    if not model.efficiency.exact:
        out = out + model.efficiency.log_aux_likelihood(eff, obs.eff_aux)
    return out

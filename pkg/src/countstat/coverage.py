"""Toy experiments, coverage scans and the unisim/multisim comparison.

Toys for grid point ``g`` are drawn in chunks of :data:`rng.CHUNK` from the
stream keyed ``(seed, g, chunk)``, so a scan gives the same counts whatever
the thread count or the order in which grid points are processed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .core import CountStatError, CountingModel, ModelError, Observation, log_poisson_pmf
from .frequentist import (
    GaussianModel,
    IntervalResult,
    classical_upper_limit,
    fc_interval,
    flip_flop_bounds,
)
from .rng import chunks, stream

METHODS = ("fc", "classical", "bayes", "profile", "flip-flop", "cls")
MIN_TOYS = 10_000


@dataclass(frozen=True)
class ToySet:
    """Vectorized toy observations; ``None`` columns for exact nuisances."""

    n: np.ndarray
    b_aux: np.ndarray | None
    eff_aux: np.ndarray | None

    def __len__(self):
        return len(self.n)

    def observation(self, i: int) -> Observation:
        b = None if self.b_aux is None else self.b_aux[i].item()
        e = None if self.eff_aux is None else self.eff_aux[i].item()
        return Observation(int(self.n[i]), b, e)

    def observations(self):
        for i in range(len(self)):
            yield self.observation(i)


def _sample(model: CountingModel, s_true: float, rng: np.random.Generator, size) -> ToySet:
    # subsidiary results first, then the main count at the true nuisance values
    b_aux = model.background.sample_aux(rng, size)
    eff_aux = model.efficiency.sample_aux(rng, size)
    n = rng.poisson(model.eff_mean * s_true + model.b_mean, size=size)
    return ToySet(np.atleast_1d(n), None if b_aux is None else np.atleast_1d(b_aux),
                  None if eff_aux is None else np.atleast_1d(eff_aux))


def generate_toy(model: CountingModel, s_true: float, rng: np.random.Generator) -> Observation:
    """One pseudo-experiment at signal ``s_true``."""
    if s_true < 0:
        raise ValueError(f"s_true must be >= 0, got {s_true}")
    return _sample(model, s_true, rng, 1).observation(0)


def draw_toys(model: CountingModel, s_true: float, n_toys: int, seed: int,
              index: int = 0) -> ToySet:
    """``n_toys`` pseudo-experiments from the streams ``(seed, index, chunk)``."""
    if s_true < 0:
        raise ValueError(f"s_true must be >= 0, got {s_true}")
    parts = [_sample(model, s_true, stream(seed, index, c), size) for c, size in chunks(n_toys)]
    cat = lambda xs: None if xs[0] is None else np.concatenate(xs)
    return ToySet(cat([p.n for p in parts]), cat([p.b_aux for p in parts]),
                  cat([p.eff_aux for p in parts]))


def _require_counting(method: str, model) -> CountingModel:
    if not isinstance(model, CountingModel):
        raise ModelError(f"method {method!r} needs a Poisson counting model, got {type(model).__name__}")
    return model


def _require_known(method: str, model: CountingModel) -> None:
    if not model.nuisance_free:
        raise ModelError(f"method {method!r} needs exact background and efficiency")


def interval_fn(method: str, model, cl: float, delta: float | None = None
                ) -> Callable[[Observation], IntervalResult]:
    """Interval procedure ``obs -> IntervalResult`` for a named method.

    ``profile`` uses the Delta(ln L) threshold ``delta``, which defaults to
    the Wilks value for ``cl``. A divergent Bayesian posterior gives the
    whole half-line.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "flip-flop":
        if not isinstance(model, GaussianModel):
            raise ModelError("flip-flop needs the unit Gaussian model, not a Poisson counting model")
        from .frequentist import flip_flop_interval

        return lambda x: flip_flop_interval(float(x), cl)
    model = _require_counting(method, model)
    eff = model.eff_mean

    def scaled(iv: IntervalResult) -> IntervalResult:
        if iv.empty or eff == 1.0:
            return iv
        return IntervalResult(iv.lower / eff, iv.upper / eff, iv.cl, iv.method)

    if method == "fc":
        _require_known(method, model)
        return lambda obs: scaled(fc_interval(obs.n, model.b_mean, cl))
    if method == "classical":
        _require_known(method, model)
        return lambda obs: scaled(classical_upper_limit(obs.n, model.b_mean, cl))
    if method == "cls":
        _require_known(method, model)
        from .significance import cls_upper_limit

        return lambda obs: IntervalResult(0.0, cls_upper_limit(obs.n, model.b_mean, cl, eff), cl, "cls")
    if method == "bayes":
        from .bayes import DivergentPosteriorError, upper_limit

        def bayes(obs):
            try:
                return upper_limit(model, obs, cl)
            except DivergentPosteriorError:
                return IntervalResult(0.0, math.inf, cl, "bayes-divergent")

        return bayes
    from .profile import profile_interval

    d = float(stats.chi2.ppf(cl, 1)) / 2 if delta is None else delta
    return lambda obs: profile_interval(model, obs, d)


def upper_limit_fn(method: str, model, cl: float) -> Callable[[Observation], float]:
    iv = interval_fn(method, model, cl)

    def upper(obs):
        r = iv(obs)
        return -math.inf if r.empty else r.upper

    return upper


@dataclass(frozen=True)
class CoverageCurve:
    s_true: np.ndarray
    covered: np.ndarray
    n_toys: int
    method: str
    seed: int | None
    coverage: np.ndarray = field(init=False)
    stderr: np.ndarray = field(init=False)

    def __post_init__(self):
        c = np.asarray(self.covered, dtype=float) / self.n_toys
        if np.any((c < 0) | (c > 1)):
            raise ValueError("coverage estimate outside [0, 1]")
        object.__setattr__(self, "coverage", c)
        object.__setattr__(self, "stderr", np.sqrt(c * (1 - c) / self.n_toys))


class _IntervalCache:
    """Bounds per distinct observation, shared across grid points."""

    def __init__(self, fn):
        self.fn = fn
        self.table: dict[tuple, tuple[float, float]] = {}

    def bounds(self, key: tuple, make_obs) -> tuple[float, float]:
        hit = self.table.get(key)
        if hit is None:
            r = self.fn(make_obs())
            hit = (math.nan, math.nan) if r.empty else (r.lower, r.upper)
            self.table[key] = hit
        return hit


def _count_covered(s: float, toys: ToySet, cache: _IntervalCache) -> int:
    cols = [toys.n.astype(float)]
    for aux in (toys.b_aux, toys.eff_aux):
        cols.append(np.zeros(len(toys)) if aux is None else aux.astype(float))
    rows, first, counts = np.unique(np.column_stack(cols), axis=0,
                                    return_index=True, return_counts=True)
    hits = 0
    for row, i, k in zip(rows, first, counts):
        lo, hi = cache.bounds(tuple(row), lambda: toys.observation(int(i)))
        # nan bounds (empty interval) never cover
        if lo <= s <= hi:
            hits += int(k)
    return hits


def _flip_flop_covered(s: float, cl: float, n_toys: int, seed: int, g: int) -> int:
    hits = 0
    for c, size in chunks(n_toys):
        x = stream(seed, g, c).normal(s, 1.0, size=size)
        lo, hi = flip_flop_bounds(x, cl)
        hits += int(np.count_nonzero((lo <= s) & (s <= hi)))
    return hits


def coverage_scan(method: str, model, s_grid, cl: float, n_toys: int, seed: int,
                  threads: int = 1, delta: float | None = None) -> CoverageCurve:
    """Fraction of toys whose interval contains ``s_true``, per grid point.

    Intervals are closed; empty intervals never cover.
    """
    if n_toys < MIN_TOYS:
        raise ValueError(f"coverage scans need at least {MIN_TOYS} toys, got {n_toys}")
    s_grid = np.asarray(s_grid, dtype=float)
    if np.any(s_grid < 0):
        raise ValueError("s_true values must be >= 0")
    fn = interval_fn(method, model, cl, delta)
    cache = _IntervalCache(fn)

    def point(g: int) -> int:
        s = float(s_grid[g])
        if method == "flip-flop":
            return _flip_flop_covered(s, cl, n_toys, seed, g)
        hits = 0
        for c, size in chunks(n_toys):
            toys = _sample(model, s, stream(seed, g, c), size)
            hits += _count_covered(s, toys, cache)
        return hits

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            covered = list(pool.map(point, range(len(s_grid))))
    else:
        covered = [point(g) for g in range(len(s_grid))]
    return CoverageCurve(s_grid, np.array(covered, dtype=np.int64), n_toys, method, seed)


def exact_coverage(method: str, model: CountingModel, s_true, cl: float,
                   delta: float | None = None) -> np.ndarray:
    """Coverage by summing the Poisson pmf over the counts, no toys."""
    model = _require_counting(method, model)
    _require_known(method, model)
    s_true = np.atleast_1d(np.asarray(s_true, dtype=float))
    mu = model.eff_mean * s_true + model.b_mean
    # counts beyond this carry less than 1e-15 of the probability
    n_max = int(stats.poisson.isf(1e-15, mu.max())) + 1
    fn = interval_fn(method, model, cl, delta)
    out = np.zeros_like(s_true)
    for n in range(n_max + 1):
        r = fn(Observation(n))
        if r.empty:
            continue
        inside = (r.lower <= s_true) & (s_true <= r.upper)
        out += np.where(inside, np.exp(log_poisson_pmf(n, mu)), 0.0)
    return out


@dataclass(frozen=True)
class SystematicsReport:
    unisim_shifts: np.ndarray
    quadrature: float
    multisim: float
    multisim_error: float
    covariance: np.ndarray


def systematics_compare(response: Callable[[np.ndarray], float], nominal, nuisance_cov,
                        n_multisim: int, seed: int) -> SystematicsReport:
    """One-at-a-time shifts versus joint sampling of the nuisances.

    Unisim: half the difference between ``response`` at ``+-1 sigma`` along
    each nuisance, added in quadrature. Multisim: standard deviation of
    ``response`` over ``n_multisim`` joint Gaussian draws.
    """
    nu0 = np.atleast_1d(np.asarray(nominal, dtype=float))
    cov = np.atleast_2d(np.asarray(nuisance_cov, dtype=float))
    if cov.shape != (nu0.size, nu0.size):
        raise ValueError(f"covariance shape {cov.shape} does not match {nu0.size} nuisances")
    if not np.allclose(cov, cov.T):
        raise ValueError("nuisance covariance is not symmetric")
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise CountStatError(f"nuisance covariance is not positive semi-definite (eigenvalue {w.min():g})")
    if n_multisim < 2:
        raise ValueError("multisim needs at least two draws")

    sig = np.sqrt(np.diag(cov))
    shifts = np.empty(nu0.size)
    for i in range(nu0.size):
        e = np.zeros(nu0.size)
        e[i] = sig[i]
        shifts[i] = abs(response(nu0 + e) - response(nu0 - e)) / 2
    quad = float(np.sqrt(np.sum(shifts**2)))

    root = v * np.sqrt(np.clip(w, 0.0, None))
    z = stream(seed, 0).standard_normal((n_multisim, nu0.size))
    draws = nu0 + z @ root.T
    t = np.array([response(d) for d in draws], dtype=float)
    sd = float(np.std(t, ddof=1))
    return SystematicsReport(shifts, quad, sd, sd / math.sqrt(2 * (n_multisim - 1)), cov)

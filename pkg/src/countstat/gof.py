"""Goodness of fit: binned chi-square, chi-square differences, the energy test.

Fits use a fixed per-bin variance (the data's override, else the observed
count floored at one), so for a fixed nonlinear shape parameter the best
linear coefficients follow from weighted least squares. Fitters work on a
whole stack of histograms at once, which keeps Monte Carlo nulls cheap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import optimize, stats
from scipy.spatial.distance import pdist, squareform

from .core import CountStatError, p_to_sigma
from .rng import chunks, stream

REGIMES = ("wilks", "mc-null")
SMALL_PREDICTION = 5.0
DELTA_TOL = 1e-6
EXHAUSTIVE_MAX = 12


@dataclass(frozen=True)
class BinnedData:
    edges: np.ndarray
    counts: np.ndarray
    variance: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        c = np.asarray(self.counts, dtype=float)
        if e.ndim != 1 or e.size != c.shape[-1] + 1:
            raise ValueError(f"need {c.shape[-1] + 1} edges for {c.shape[-1]} bins, got {e.size}")
        if np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must be strictly ascending")
        if np.any(c < 0):
            raise ValueError("counts must be >= 0")
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "counts", c)
        if self.variance is not None:
            v = np.broadcast_to(np.asarray(self.variance, dtype=float), c.shape[-1:])
            if np.any(v <= 0):
                raise ValueError("variance override must be positive")
            object.__setattr__(self, "variance", np.array(v))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def n_bins(self) -> int:
        return self.counts.shape[-1]

    def fit_variance(self) -> np.ndarray:
        if self.variance is not None:
            return self.variance
        return np.maximum(self.counts, 1.0)


@dataclass(frozen=True)
class Chi2Result:
    S: float
    ndof: int
    p: float
    small_prediction: bool = False


def chi2_pvalue(S: float, ndof: int) -> float:
    return float(stats.chi2.sf(S, ndof))


def chi2_binned(data: BinnedData, prediction, n_fitted: int = 0) -> Chi2Result:
    """``S = sum (obs - pred)^2 / var`` against chi-square with ``bins - n_fitted`` dof.

    ``var`` is the prediction unless the data carry a variance override.
    ``small_prediction`` flags bins below 5 expected, where the Gaussian
    approximation behind the chi-square tail is poor.
    """
    pred = np.asarray(prediction, dtype=float)
    if pred.shape != data.counts.shape:
        raise ValueError(f"prediction shape {pred.shape} != data shape {data.counts.shape}")
    bad = np.flatnonzero(pred <= 0)
    if bad.size:
        raise ValueError(f"prediction must be > 0 in every bin; bin {bad[0]} has {pred[bad[0]]}")
    ndof = data.n_bins - n_fitted
    if ndof < 1:
        raise ValueError(f"no degrees of freedom left: {data.n_bins} bins, {n_fitted} fitted")
    var = pred if data.variance is None else data.variance
    S = float(np.sum((data.counts - pred) ** 2 / var))
    return Chi2Result(S, ndof, chi2_pvalue(S, ndof), bool(np.any(pred < SMALL_PREDICTION)))


# -- fitters ---------------------------------------------------------------


class Fitter(Protocol):
    n_params: int

    def chi2(self, y: np.ndarray, var: np.ndarray) -> np.ndarray:
        """Minimum chi-square for each row of ``y``."""


def _wls_chi2(X: np.ndarray, y: np.ndarray, var: np.ndarray, nonneg: int | None = None):
    """Weighted least-squares residual for every row of ``y`` at once.

    ``nonneg`` names a column whose coefficient must be >= 0; rows where
    the free fit goes negative are refit without that column.
    """
    w = 1.0 / np.sqrt(var)
    Xw = X * w[:, None]
    yw = y * w
    coef, *_ = np.linalg.lstsq(Xw, yw.T, rcond=None)
    out = np.sum((yw - (Xw @ coef).T) ** 2, axis=-1)
    if nonneg is not None:
        neg = coef[nonneg] < 0
        if np.any(neg):
            keep = [j for j in range(X.shape[1]) if j != nonneg]
            out[neg] = _wls_chi2(X[:, keep], y[neg], var)
    return out


@dataclass(frozen=True)
class PolynomialFitter:
    """Polynomial of degree ``degree`` in the bin centres."""

    x: np.ndarray
    degree: int

    @property
    def n_params(self) -> int:
        return self.degree + 1

    def design(self) -> np.ndarray:
        t = (self.x - self.x.mean()) / max(np.ptp(self.x), 1e-300)
        return np.vander(t, self.degree + 1, increasing=True)

    def chi2(self, y, var):
        return _wls_chi2(self.design(), np.atleast_2d(y), var)


@dataclass(frozen=True)
class PeakFitter:
    """Polynomial background plus ``A exp(-(x - x0)^2 / (2 sigma^2))`` with ``A >= 0``.

    The position and width are scanned on a grid; the linear coefficients
    are solved exactly at each node. ``refine`` polishes the best node with
    bounded quasi-Newton steps from it and from ``n_restarts`` random nodes.
    """

    x: np.ndarray
    bkg_degree: int = 1
    x0_range: tuple[float, float] | None = None
    sigma_range: tuple[float, float] = (0.5, 3.0)
    n_x0: int = 60
    n_sigma: int = 8
    refine: bool = False
    n_restarts: int = 5

    @property
    def n_params(self) -> int:
        return self.bkg_degree + 4

    def _bkg(self) -> np.ndarray:
        return PolynomialFitter(self.x, self.bkg_degree).design()

    def _x0_range(self):
        return self.x0_range or (float(self.x.min()), float(self.x.max()))

    def _chi2_at(self, y, var, x0, sig):
        peak = np.exp(-0.5 * ((self.x - x0) / sig) ** 2)
        X = np.column_stack([self._bkg(), peak])
        return _wls_chi2(X, y, var, nonneg=X.shape[1] - 1)

    def chi2(self, y, var):
        y = np.atleast_2d(y)
        lo, hi = self._x0_range()
        x0s = np.linspace(lo, hi, self.n_x0)
        sigs = np.geomspace(*self.sigma_range, self.n_sigma)
        table = np.array([[self._chi2_at(y, var, a, s) for s in sigs] for a in x0s])
        best = table.min(axis=(0, 1))
        if not self.refine:
            return best
        rng = stream(0, y.shape[0])
        out = best.copy()
        for r in range(y.shape[0]):
            ia, js = np.unravel_index(np.argmin(table[:, :, r]), table.shape[:2])
            starts = [(x0s[ia], sigs[js])] + [
                (rng.uniform(lo, hi), math.exp(rng.uniform(*np.log(self.sigma_range))))
                for _ in range(self.n_restarts)
            ]
            f = lambda p: float(self._chi2_at(y[r:r + 1], var, p[0], p[1])[0])
            for s0 in starts:
                res = optimize.minimize(f, s0, method="L-BFGS-B",
                                        bounds=[(lo, hi), self.sigma_range])
                out[r] = min(out[r], res.fun)
        return out


@dataclass(frozen=True)
class ShapeScanFitter:
    """``norm * shape(x, theta)`` with ``norm`` linear and ``theta`` on a grid."""

    x: np.ndarray
    shape: Callable[[np.ndarray, float], np.ndarray]
    theta_grid: np.ndarray
    n_params: int = 2

    def chi2(self, y, var):
        y = np.atleast_2d(y)
        rows = [_wls_chi2(self.shape(self.x, t)[:, None], y, var) for t in self.theta_grid]
        return np.min(rows, axis=0)


@dataclass(frozen=True)
class LinearTemplateFitter:
    """``base + c * template`` with ``c`` free, plus a scanned template family."""

    base: np.ndarray
    templates: Callable[[float], np.ndarray]
    theta_grid: np.ndarray
    n_params: int = 2

    def chi2(self, y, var):
        y = np.atleast_2d(y) - self.base
        rows = [_wls_chi2(self.templates(t)[:, None], y, var) for t in self.theta_grid]
        return np.min(rows, axis=0)


# -- chi-square differences ------------------------------------------------


@dataclass(frozen=True)
class DeltaChi2Result:
    delta: float
    p: float
    k_extra: int
    regime: str
    null: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma(self) -> float:
        """Two-sided Gaussian equivalent; ``sqrt(delta)`` for one extra parameter."""
        if self.p <= 0:
            return math.inf
        return max(float(p_to_sigma(self.p / 2)), 0.0)


def delta_chi2_wilks(chi2_0: float, chi2_1: float, k_extra: int) -> DeltaChi2Result:
    """Wilks p-value for a chi-square improvement of ``chi2_0 - chi2_1``."""
    delta = chi2_0 - chi2_1
    if delta < -DELTA_TOL:
        raise CountStatError(f"extended fit is worse than the restricted one (delta={delta:g})")
    delta = max(delta, 0.0)
    return DeltaChi2Result(delta, float(stats.chi2.sf(delta, k_extra)), k_extra, "wilks")


def chi2_difference(data: BinnedData, fit0: Fitter, fit1: Fitter, k_extra: int,
                    regime: str = "wilks", toy_generator=None, n_toys: int = 0,
                    seed: int | None = None) -> DeltaChi2Result:
    """Compare a restricted fit with an extended one.

    ``wilks`` takes the p-value from chi-square with ``k_extra`` dof and is
    only valid for nested models whose extra parameters are identified and
    away from boundaries. ``mc-null`` builds the null from
    ``toy_generator(rng, size) -> counts`` (rows of histograms drawn from the
    restricted model) with the add-one estimator ``(1 + tail) / (1 + toys)``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    var = data.fit_variance()
    c0 = float(fit0.chi2(data.counts, var)[0])
    c1 = float(fit1.chi2(data.counts, var)[0])
    if c0 - c1 < -DELTA_TOL and getattr(fit1, "refine", True) is False:
        # one retry with local refinement before giving up
        from dataclasses import replace

        c1 = float(replace(fit1, refine=True).chi2(data.counts, var)[0])
    if regime == "wilks":
        return delta_chi2_wilks(c0, c1, k_extra)
    if toy_generator is None or n_toys < 1 or seed is None:
        raise ValueError("mc-null needs toy_generator, n_toys >= 1 and a seed")
    obs = delta_chi2_wilks(c0, c1, k_extra).delta
    null = delta_chi2_null(fit0, fit1, toy_generator, var, n_toys, seed)
    p = (1 + int(np.count_nonzero(null >= obs))) / (n_toys + 1)
    return DeltaChi2Result(obs, p, k_extra, regime, null)


def delta_chi2_null(fit0: Fitter, fit1: Fitter, toy_generator, var, n_toys: int,
                    seed: int) -> np.ndarray:
    """Delta chi-square over toys from the restricted model, clipped at zero."""
    out = []
    for c, size in chunks(n_toys):
        y = np.asarray(toy_generator(stream(seed, c), size), dtype=float)
        out.append(np.maximum(fit0.chi2(y, var) - fit1.chi2(y, var), 0.0))
    return np.concatenate(out)


# -- effective degrees of freedom ------------------------------------------


@dataclass(frozen=True)
class ModelFamily:
    """Toy generator and fitter for an effective-dof study."""

    name: str
    generate: Callable[[np.random.Generator, int], np.ndarray]
    variance: np.ndarray
    fitter: Fitter


@dataclass(frozen=True)
class DofScan:
    mean_S: float
    var_S: float
    stderr: float
    n_bins: int
    candidates: dict[int, float]
    effective_f: int


def effective_dof_scan(family: ModelFamily, n_bins: int, n_toys: int, seed: int) -> DofScan:
    """Mean minimum chi-square over toys and the parameter count it implies."""
    parts = []
    for c, size in chunks(n_toys):
        y = np.asarray(family.generate(stream(seed, c), size), dtype=float)
        if y.shape[-1] != n_bins:
            raise ValueError(f"family produced {y.shape[-1]} bins, expected {n_bins}")
        parts.append(family.fitter.chi2(y, family.variance))
    S = np.concatenate(parts)
    failed = ~np.isfinite(S)
    if failed.mean() > 0.01:
        raise CountStatError(f"{failed.sum()} of {n_toys} fits failed for {family.name}")
    S = S[~failed]
    mean = float(S.mean())
    cands = {f: float(n_bins - f) for f in range(family.fitter.n_params + 1)}
    best = min(cands, key=lambda f: abs(mean - cands[f]))
    return DofScan(mean, float(S.var(ddof=1)), float(S.std(ddof=1) / math.sqrt(S.size)),
                   n_bins, cands, best)


def linear_family(n_bins: int = 50, level: float = 1e4, slope: float = 0.2) -> ModelFamily:
    """Poisson counts on a straight line; both line parameters are active."""
    x = np.arange(n_bins) + 0.5
    mu = level * (1 + slope * (x - x.mean()) / n_bins)
    return ModelFamily("linear", lambda rng, k: rng.poisson(mu, (k, n_bins)), mu,
                       PolynomialFitter(x, 1))


def cos_phase_family(n_bins: int = 50, level: float = 1e4, amp: float = 1e-6,
                     n_phase: int = 36) -> ModelFamily:
    """``N (1 + amp cos(x - x0))``: the phase is free but has no visible effect."""
    x = np.linspace(0, 2 * math.pi, n_bins, endpoint=False)
    mu = level * (1 + amp * np.cos(x - 1.0))
    shape = lambda xx, x0: 1 + amp * np.cos(xx - x0)
    grid = np.linspace(0, 2 * math.pi, n_phase, endpoint=False)
    return ModelFamily("cos-phase", lambda rng, k: rng.poisson(mu, (k, n_bins)), mu,
                       ShapeScanFitter(x, shape, grid))


def oscillation_family(n_bins: int = 50, level: float = 1e4, amplitude: float = 0.5,
                       dm2: float = 0.05, n_dm2: int = 25) -> ModelFamily:
    """Survival ``1 - A sin^2(C dm2)`` with ``C dm2`` small in every bin.

    Only ``A dm2^2`` is identified, so two nominal parameters act as one.
    """
    c = np.linspace(0.5, 1.5, n_bins)
    mu = level * (1 - amplitude * np.sin(c * dm2) ** 2)
    base = np.full(n_bins, level)
    templates = lambda d: -level * np.sin(c * d) ** 2
    grid = np.geomspace(0.2 * dm2, 2 * dm2, n_dm2)
    return ModelFamily("oscillation", lambda rng, k: rng.poisson(mu, (k, n_bins)), mu,
                       LinearTemplateFitter(base, templates, grid))


# -- energy test -----------------------------------------------------------


@dataclass(frozen=True)
class TwoSample:
    a: np.ndarray
    b: np.ndarray
    scales: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        a = a[:, None] if a.ndim == 1 else a
        b = b[:, None] if b.ndim == 1 else b
        if a.shape[0] == 0 or b.shape[0] == 0:
            raise ValueError("both samples must be non-empty")
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"samples live in different spaces: d={a.shape[1]} vs d={b.shape[1]}")
        sc = np.ones(a.shape[1]) if self.scales is None else np.asarray(self.scales, dtype=float)
        if sc.shape != (a.shape[1],) or np.any(sc <= 0):
            raise ValueError(f"need {a.shape[1]} positive metric scales, got {self.scales}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "scales", sc)

    def pooled(self) -> np.ndarray:
        return np.vstack([self.a, self.b]) / self.scales


@dataclass(frozen=True)
class EnergyResult:
    E: float
    p: float
    n_perm: int
    exhaustive: bool
    epsilon: float


def _kernel(points: np.ndarray, epsilon: float | None) -> tuple[np.ndarray, float]:
    d = pdist(points)
    if epsilon is None:
        med = float(np.median(d)) if d.size else 1.0
        epsilon = 1e-6 * (med if med > 0 else 1.0)
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    F = squareform(-np.log(d + epsilon))
    return F, epsilon


def _energies(F: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``sum_{i<j} q_i q_j F_ij`` for each row of charges (zero diagonal)."""
    return 0.5 * np.einsum("ij,ij->i", Q @ F, Q)


def _charges(in_a: np.ndarray, n_a: int, n_b: int) -> np.ndarray:
    return np.where(in_a, 1.0 / n_a, -1.0 / n_b)


def energy_statistic(ts: TwoSample, epsilon: float | None = None) -> float:
    F, _ = _kernel(ts.pooled(), epsilon)
    n_a, n_b = len(ts.a), len(ts.b)
    in_a = np.arange(n_a + n_b) < n_a
    return float(_energies(F, _charges(in_a, n_a, n_b)[None, :])[0])


def energy_test(ts: TwoSample, epsilon: float | None = None, n_perm: int = 999,
                seed: int | None = None) -> EnergyResult:
    """Two-sample energy test with a permutation p-value.

    Points of the first sample carry charge ``+1/|A|``, the second
    ``-1/|B|``; the kernel is ``-ln(d + epsilon)``. Pooled samples of up to
    12 points are relabelled exhaustively, which gives an exact p-value;
    larger ones use ``n_perm`` random relabellings and the add-one estimator.
    """
    n_a, n_b = len(ts.a), len(ts.b)
    N = n_a + n_b
    F, eps = _kernel(ts.pooled(), epsilon)
    in_a = np.arange(N) < n_a
    e_obs = float(_energies(F, _charges(in_a, n_a, n_b)[None, :])[0])
    tol = 1e-12 * max(1.0, abs(e_obs))

    if N <= EXHAUSTIVE_MAX:
        combos = list(itertools.combinations(range(N), n_a))
        mask = np.zeros((len(combos), N), dtype=bool)
        for r, idx in enumerate(combos):
            mask[r, list(idx)] = True
        E = _energies(F, _charges(mask, n_a, n_b))
        p = int(np.count_nonzero(E >= e_obs - tol)) / len(combos)
        return EnergyResult(e_obs, p, len(combos), True, eps)

    if n_perm < 99:
        raise ValueError(f"n_perm must be >= 99, got {n_perm}")
    if seed is None:
        raise ValueError("random permutations need a seed")
    hits = 0
    for c, size in chunks(n_perm, 4096):
        rng = stream(seed, c)
        keys = rng.random((size, N))
        # the n_a smallest keys go to the first sample
        ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
        E = _energies(F, _charges(ranks < n_a, n_a, n_b))
        hits += int(np.count_nonzero(E >= e_obs - tol))
    return EnergyResult(e_obs, (1 + hits) / (n_perm + 1), n_perm, False, eps)

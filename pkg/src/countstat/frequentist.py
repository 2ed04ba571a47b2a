"""Neyman belts for the Poisson count with known background.

Three ordering rules are available: ``upper`` (reject the lowest counts),
``central`` (equal tails) and ``likelihood-ratio`` (Feldman-Cousins). The
flip-flop policy for a unit-Gaussian measurement lives here too, since its
only purpose is to be contrasted with the unified construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .core import CountStatError, log_poisson_pmf

ORDERINGS = ("upper", "central", "likelihood-ratio")


class BeltTruncatedError(CountStatError):
    pass


@dataclass(frozen=True)
class IntervalResult:
    lower: float | None
    upper: float | None
    cl: float
    method: str
    empty: bool = False

    def __post_init__(self):
        if not 0 < self.cl < 1:
            raise ValueError(f"confidence level must be in (0, 1), got {self.cl}")
        if self.empty:
            if self.lower is not None or self.upper is not None:
                raise ValueError("empty interval cannot carry bounds")
        elif not (0 <= self.lower <= self.upper):
            raise ValueError(f"invalid interval [{self.lower}, {self.upper}]")

    @classmethod
    def empty_interval(cls, cl: float, method: str) -> IntervalResult:
        return cls(None, None, cl, method, empty=True)

    def contains(self, s: float) -> bool:
        """Closed-interval membership; empty intervals contain nothing."""
        if self.empty:
            return False
        return self.lower <= s <= self.upper


@dataclass(frozen=True)
class ConfidenceBelt:
    """Acceptance ranges ``[n_lo, n_hi]`` for each signal on ``s_grid``.

    ``n_hi`` equal to ``n_cap`` means the range is open above (upper ordering).
    """

    s_grid: np.ndarray
    n_lo: np.ndarray
    n_hi: np.ndarray
    ordering: str
    cl: float
    b: float
    n_cap: int
    coverage: np.ndarray

    def accepts(self, n: int) -> np.ndarray:
        return (self.n_lo <= n) & (n <= self.n_hi)

    def invert(self, n: int, refine: bool = True) -> IntervalResult:
        method = f"neyman-{self.ordering}"
        inside = self.accepts(n)
        if not inside.any():
            return IntervalResult.empty_interval(self.cl, method)
        idx = np.flatnonzero(inside)
        i_lo, i_hi = idx[0], idx[-1]
        if i_hi == len(self.s_grid) - 1:
            raise BeltTruncatedError(
                f"belt truncated: n={n} still accepted at s_max={self.s_grid[-1]:g}"
            )
        lower = float(self.s_grid[i_lo])
        upper = float(self.s_grid[i_hi])
        if refine:
            accept = lambda s: _accepts_at(s, n, self.b, self.cl, self.ordering, self.n_cap)
            if i_lo > 0:
                lower = _bisect_edge(accept, float(self.s_grid[i_lo - 1]), lower)
            upper = _bisect_edge(accept, upper, float(self.s_grid[i_hi + 1]))
        return IntervalResult(lower, upper, self.cl, method)


def _bisect_edge(accept, a: float, b: float, tol: float = 1e-7) -> float:
    """Locate the membership change between ``a`` and ``b`` (one side accepted)."""
    fa = accept(a)
    while b - a > tol:
        m = 0.5 * (a + b)
        if accept(m) == fa:
            a = m
        else:
            b = m
    return a if fa else b


def _count_cap(mu_max: float) -> int:
    return int(math.ceil(mu_max + 12 * math.sqrt(mu_max) + 30))


def _acceptance(s: np.ndarray, b: float, cl: float, ordering: str, n_cap: int):
    """Acceptance ranges and their exact probability content for each ``s``.

    ``b`` may be a scalar or an array matching ``s`` (one background per row).
    """
    n = np.arange(n_cap + 1)
    b = np.broadcast_to(np.asarray(b, dtype=float), s.shape)
    mu = (s + b)[:, None]
    logp = log_poisson_pmf(n[None, :], mu)
    p = np.exp(logp)
    alpha = 1.0 - cl
    if ordering == "upper":
        cdf = np.cumsum(p, axis=1)
        n_lo = np.sum(cdf <= alpha, axis=1)
        n_hi = np.full(len(s), n_cap)
    elif ordering == "central":
        cdf = np.cumsum(p, axis=1)
        n_lo = np.sum(cdf <= alpha / 2, axis=1)
        # upper tail P(N > k), summed from the far end for accuracy
        upper_tail = np.cumsum(p[:, ::-1], axis=1)[:, ::-1] - p
        n_hi = np.argmax(upper_tail <= alpha / 2, axis=1)
    elif ordering == "likelihood-ratio":
        mu_best = np.maximum(n[None, :], b[:, None])
        log_r = logp - log_poisson_pmf(n[None, :], mu_best)
        nn = np.broadcast_to(n, log_r.shape)
        # decreasing R, ties broken towards larger n
        order = np.lexsort((-nn, -log_r))
        csum = np.cumsum(np.take_along_axis(p, order, axis=1), axis=1)
        k = np.argmax(csum >= cl, axis=1)
        ranks = np.arange(n_cap + 1)[None, :]
        chosen = np.where(ranks <= k[:, None], np.take_along_axis(nn, order, axis=1), -1)
        n_hi = chosen.max(axis=1)
        n_lo = np.where(chosen >= 0, chosen, n_cap + 1).min(axis=1)
    else:
        raise ValueError(f"unknown ordering {ordering!r}; choose from {ORDERINGS}")
    inside = (n[None, :] >= n_lo[:, None]) & (n[None, :] <= n_hi[:, None])
    coverage = np.where(inside, p, 0.0).sum(axis=1)
    if ordering == "upper":
        # open upper end: include the mass beyond the cap
        coverage = coverage + np.clip(1.0 - p.sum(axis=1), 0.0, None)
    return n_lo, n_hi, coverage


def _accepts_at(s: float, n: int, b: float, cl: float, ordering: str, n_cap: int) -> bool:
    lo, hi, _ = _acceptance(np.array([s]), b, cl, ordering, n_cap)
    return bool(lo[0] <= n <= hi[0])


def build_belt(
    b: float,
    cl: float,
    ordering: str,
    s_max: float,
    ds: float = 0.005,
    n_max: int | None = None,
) -> ConfidenceBelt:
    """Neyman belt on ``0, ds, ..., s_max`` for background ``b``.

    If ``n_max`` is given, the belt must close above every count up to it,
    otherwise :class:`BeltTruncatedError` is raised.
    """
    if b < 0:
        raise ValueError(f"background must be >= 0, got {b}")
    if not 0 < cl < 1:
        raise ValueError(f"confidence level must be in (0, 1), got {cl}")
    if ds <= 0 or s_max <= 0:
        raise ValueError("grid step and s_max must be positive")
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}; choose from {ORDERINGS}")
    s_grid = np.arange(0.0, s_max + 0.5 * ds, ds)
    n_cap = _count_cap(s_grid[-1] + b)
    n_lo, n_hi, coverage = _acceptance(s_grid, b, cl, ordering, n_cap)
    if n_max is not None and n_lo[-1] <= n_max:
        raise BeltTruncatedError(
            f"belt truncated: s_max={s_max:g} does not close the belt for n <= {n_max}"
        )
    return ConfidenceBelt(s_grid, n_lo, n_hi, ordering, cl, b, n_cap, coverage)


def _auto_s_max(n: int, b: float) -> float:
    return max(5.0, 1.5 * n + 6 * math.sqrt(n + 1) + 5)


def _raw_fc(n: int, b: float, cl: float, ds: float, refine: bool = True) -> IntervalResult:
    s_max = _auto_s_max(n, b)
    while True:
        try:
            belt = build_belt(b, cl, "likelihood-ratio", s_max, ds, n_max=n)
            return belt.invert(n, refine=refine)
        except BeltTruncatedError:
            s_max *= 2


# background window and step for the monotone-in-b upper-limit envelope
_ENVELOPE_WINDOW = 2.0
_ENVELOPE_STEP = 0.02
_COARSE_DS = 0.02


def _coarse_upper_vs_b(n: int, b_grid: np.ndarray, cl: float, near: float) -> np.ndarray:
    """Grid-resolution upper limits for ``n`` at each background in ``b_grid``."""
    lo_s = max(0.0, near - 1.5)
    span = 1.5
    while True:
        s_win = np.arange(lo_s, near + span, _COARSE_DS)
        ss, bb = np.meshgrid(s_win, b_grid)
        n_cap = _count_cap(s_win[-1] + b_grid[-1])
        n_lo, n_hi, _ = _acceptance(ss.ravel(), bb.ravel(), cl, "likelihood-ratio", n_cap)
        acc = ((n_lo <= n) & (n <= n_hi)).reshape(ss.shape)
        if not acc[:, -1].any():
            break
        span *= 2
    has = acc.any(axis=1)
    last = len(s_win) - 1 - np.argmax(acc[:, ::-1], axis=1)
    return np.where(has, s_win[last], -1.0)


def _upward_jumps(n: int, b: float, cl: float, near: float) -> list[float]:
    """Backgrounds in ``(b, b + window]`` where the raw upper limit jumps up."""
    b_grid = b + np.arange(0, round(_ENVELOPE_WINDOW / _ENVELOPE_STEP) + 1) * _ENVELOPE_STEP
    coarse = _coarse_upper_vs_b(n, b_grid, cl, near)
    jumps = []
    for i in np.flatnonzero(np.diff(coarse) > 1.5 * _COARSE_DS):
        lo, hi = float(b_grid[i]), float(b_grid[i + 1])
        cut = 0.5 * (coarse[i] + coarse[i + 1])
        high_branch = lambda bb: _raw_fc(n, bb, cl, 0.005, refine=False).upper > cut
        while hi - lo > 1e-5:
            mid = 0.5 * (lo + hi)
            if high_branch(mid):
                hi = mid
            else:
                lo = mid
        jumps.append(hi)
    return jumps


@lru_cache(maxsize=4096)
def fc_interval(n: int, b: float, cl: float, ds: float = 0.005) -> IntervalResult:
    """Feldman-Cousins interval for ``n`` observed counts on background ``b``.

    The raw likelihood-ratio belt gives an upper limit that jumps up at
    isolated backgrounds. As in the published FC tables, the upper limit is
    replaced by its supremum over all larger backgrounds (within a window of
    two counts), which makes it non-increasing in ``b``. Between jumps the
    raw limit falls with ``b``, so the supremum sits just past a jump.
    """
    if n < 0:
        raise ValueError(f"observed count must be >= 0, got {n}")
    if b < 0:
        raise ValueError(f"background must be >= 0, got {b}")
    raw = _raw_fc(n, b, cl, ds)
    upper = raw.upper
    for bb in _upward_jumps(n, float(b), cl, raw.upper):
        upper = max(upper, _raw_fc(n, bb, cl, ds).upper)
    return IntervalResult(raw.lower, upper, cl, "fc")


def classical_upper_limit(n: int, b: float, cl: float) -> IntervalResult:
    """Neyman upper limit solving ``P(N <= n | s_up + b) = 1 - cl``.

    Returns an empty interval when even ``s = 0`` is excluded.
    """
    if n < 0 or b < 0:
        raise ValueError("count and background must be non-negative")
    if not 0 < cl < 1:
        raise ValueError(f"confidence level must be in (0, 1), got {cl}")
    mu_up = float(special.gammainccinv(n + 1, 1.0 - cl))
    s_up = mu_up - b
    if s_up < 0:
        return IntervalResult.empty_interval(cl, "classical")
    return IntervalResult(0.0, s_up, cl, "classical")


@dataclass(frozen=True)
class GaussianModel:
    """Measurement ``x ~ N(s, 1)`` with ``s >= 0``, used by the flip-flop policy."""

    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma != 1.0:
            raise ValueError("flip-flop policy is defined for unit variance only")


def flip_flop_bounds(x, cl: float, switch_sigma: float = 3.0):
    """Vectorized flip-flop interval bounds for measurements ``x``."""
    x = np.asarray(x, dtype=float)
    z_one = special.ndtri(cl)
    z_two = special.ndtri(0.5 * (1 + cl))
    central = x >= switch_sigma
    lower = np.where(central, np.maximum(0.0, x - z_two), 0.0)
    upper = np.where(central, x + z_two, np.maximum(0.0, x) + z_one)
    return lower, upper


def flip_flop_interval(x: float, cl: float, switch_sigma: float = 3.0) -> IntervalResult:
    """Upper limit below ``switch_sigma``, central interval at or above it."""
    lo, hi = flip_flop_bounds(x, cl, switch_sigma)
    return IntervalResult(float(lo), float(hi), cl, "flip-flop")

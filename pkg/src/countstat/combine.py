"""Weighted averages of measurements, with and without correlations.

Also home to the Poisson-weight bias demonstration and a hidden-offset
blinding helper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext

import numpy as np

from .core import CountStatError
from .rng import CHUNK, chunks, key_to_seed, stream

WEIGHTINGS = ("observed", "expected-at-estimate", "iterated")
BLIND_RANGE = (-1.0, 1.0)
# enough digits that any double plus the offset is represented exactly
BLIND_PREC = 800
ITER_TOL = 1e-9


class SingularCovarianceError(CountStatError):
    pass


@dataclass(frozen=True)
class Measurement:
    value: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def weight(self) -> float:
        return 1.0 / self.sigma**2


@dataclass(frozen=True)
class MeasurementSet:
    """Values with their full error matrix."""

    values: np.ndarray
    covariance: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        c = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if c.shape != (v.size, v.size):
            raise ValueError(f"covariance shape {c.shape} does not match {v.size} values")
        if not np.allclose(c, c.T, rtol=1e-12, atol=0):
            raise ValueError("covariance matrix is not symmetric")
        if np.any(np.diag(c) <= 0):
            raise ValueError("covariance diagonal must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "covariance", c)

    @classmethod
    def from_correlation(cls, values, sigmas, corr, labels=()) -> MeasurementSet:
        s = np.asarray(sigmas, dtype=float)
        r = np.asarray(corr, dtype=float)
        if r.ndim == 0:
            r = np.array([[1.0, float(r)], [float(r), 1.0]])
        return cls(values, r * np.outer(s, s), tuple(labels))

    @classmethod
    def uncorrelated(cls, ms) -> MeasurementSet:
        ms = list(ms)
        return cls([m.value for m in ms], np.diag([m.sigma**2 for m in ms]))

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


@dataclass(frozen=True)
class CombinedResult:
    a_best: float
    sigma_best: float
    S: float
    n: int
    outside_range: bool = False
    weights: np.ndarray = field(default=None, repr=False)
    scale_factor: float = field(init=False)
    scaled_sigma: float = field(init=False)

    def __post_init__(self):
        # only inflate, never shrink
        ratio = self.S / (self.n - 1)
        f = math.sqrt(ratio) if ratio > 1 else 1.0
        object.__setattr__(self, "scale_factor", f)
        object.__setattr__(self, "scaled_sigma", f * self.sigma_best)


def weighted_average(ms) -> CombinedResult:
    """Inverse-variance weighted mean of uncorrelated measurements."""
    ms = list(ms)
    if len(ms) < 2:
        raise ValueError(f"need at least two measurements, got {len(ms)}")
    a = np.array([m.value for m in ms])
    w = np.array([m.weight for m in ms])
    best = float(np.sum(w * a) / np.sum(w))
    S = float(np.sum(w * (a - best) ** 2))
    return CombinedResult(best, float(1 / math.sqrt(np.sum(w))), S, len(ms), False, w / w.sum())


def correlated_average(mset: MeasurementSet) -> CombinedResult:
    """Minimum of ``(a - x)^T H (a - x)`` with ``H`` the inverse error matrix.

    ``a_best = sum_ij H_ij a_j / sum_ij H_ij``; with strong positive
    correlation the weights can go negative and ``a_best`` leaves the range
    spanned by the inputs.
    """
    n = mset.values.size
    if n < 2:
        raise ValueError(f"need at least two measurements, got {n}")
    c = mset.covariance
    sig = np.sqrt(np.diag(c))
    corr = c / np.outer(sig, sig)
    eig = np.linalg.eigvalsh(corr)
    if eig.min() <= 1e-12:
        raise SingularCovarianceError(
            "covariance is singular (fully correlated measurements): a combination is"
            " meaningless; select one of the two analyses instead"
        )
    H = np.linalg.inv(c)
    row = H.sum(axis=1)
    total = float(row.sum())
    w = row / total
    a = mset.values
    best = float(w @ a)
    r = a - best
    S = float(r @ H @ r)
    # rounding slack so that equal inputs do not trip the flag
    tol = 1e-12 * max(1.0, float(np.abs(a).max()))
    outside = bool(best < a.min() - tol or best > a.max() + tol)
    return CombinedResult(best, 1.0 / math.sqrt(total), S, n, outside, w)


@dataclass(frozen=True)
class BiasEstimate:
    bias: float
    error: float
    weighting: str
    true_mean: float
    n_repeats: int

    @property
    def significance(self) -> float:
        return self.bias / self.error


def _pair_average(x1: np.ndarray, x2: np.ndarray, weighting: str) -> np.ndarray:
    if weighting == "observed":
        # weights 1/x, with zero counts guarded by max(x, 1)
        w1, w2 = 1 / np.maximum(x1, 1), 1 / np.maximum(x2, 1)
        return (w1 * x1 + w2 * x2) / (w1 + w2)
    if weighting == "expected-at-estimate":
        # variance sqrt-expected taken at each value's own fitted mean
        # gives weights 1/a, and the minimum of sum (x - a)^2 / a is the rms
        return np.sqrt(0.5 * (x1**2 + x2**2))
    # fixed point: both weights from the common estimate, i.e. the plain mean
    a = 0.5 * (x1 + x2)
    for _ in range(100):
        w = 1 / np.maximum(a, 1)
        new = (w * x1 + w * x2) / (2 * w)
        if np.max(np.abs(new - a)) <= ITER_TOL:
            return new
        a = new
    return a


def poisson_weight_bias(true_mean: float, n_repeats: int, weighting: str,
                        seed: int) -> BiasEstimate:
    """Bias of combining two Poisson counts with count-derived weights.

    ``observed``: each count weighted by ``1/x``, which favours downward
    fluctuations. ``expected-at-estimate``: the error of each count is the
    square root of the expected number at the fitted mean, so ``S(a) =
    sum (x_i - a)^2 / a`` is minimized, which favours upward fluctuations.
    ``iterated``: weights re-derived from the current combined value until it
    stops moving (tolerance 1e-9).
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")
    if true_mean < 5:
        raise ValueError(f"true_mean must be >= 5, got {true_mean}")
    total = 0.0
    total_sq = 0.0
    for c, size in chunks(n_repeats, CHUNK):
        x = stream(seed, c).poisson(true_mean, size=(size, 2)).astype(float)
        d = _pair_average(x[:, 0], x[:, 1], weighting) - true_mean
        total += float(np.sum(d))
        total_sq += float(np.sum(d**2))
    mean = total / n_repeats
    var = (total_sq - n_repeats * mean**2) / (n_repeats - 1)
    return BiasEstimate(mean, math.sqrt(var / n_repeats), weighting, true_mean, n_repeats)


def _offset(key, lo: float, hi: float) -> Decimal:
    u = stream(key_to_seed(key), 0).random()
    # quantize so that adding and subtracting it is exact in decimal
    return Decimal(repr(lo + (hi - lo) * u)).quantize(Decimal("1e-12"))


def blind_offset(value: float, key, offset_range=BLIND_RANGE) -> Decimal:
    """Add a secret offset derived from ``key``; the offset itself is never stored."""
    with localcontext() as ctx:
        ctx.prec = BLIND_PREC
        return Decimal(repr(float(value))) + _offset(key, *offset_range)


def unblind(blinded, key, offset_range=BLIND_RANGE) -> float:
    with localcontext() as ctx:
        ctx.prec = BLIND_PREC
        return float(Decimal(str(blinded)) - _offset(key, *offset_range))

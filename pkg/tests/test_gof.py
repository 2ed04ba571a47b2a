import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from countstat.core import CountStatError, sigma_to_p
from countstat.gof import (
    BinnedData,
    PeakFitter,
    PolynomialFitter,
    TwoSample,
    chi2_binned,
    chi2_difference,
    chi2_pvalue,
    cos_phase_family,
    delta_chi2_wilks,
    effective_dof_scan,
    energy_statistic,
    energy_test,
    linear_family,
    oscillation_family,
)
from countstat.rng import stream


def hist(counts, variance=None):
    counts = np.asarray(counts, dtype=float)
    return BinnedData(np.arange(counts.size + 1.0), counts, variance)


def test_perfect_prediction():
    r = chi2_binned(hist([5, 6, 7]), [5, 6, 7])
    assert r.S == 0.0 and r.p == 1.0


def test_chi2_expected_value_with_one_fitted_parameter():
    r = chi2_binned(hist(np.full(100, 50.0)), np.full(100, 50.0), n_fitted=1)
    assert r.ndof == 99
    assert stats.chi2.mean(99) == 99
    assert stats.chi2.std(99) == pytest.approx(14.07, abs=0.01)


def test_chi2_pvalue_well_within_range():
    assert chi2_pvalue(110, 99) == pytest.approx(0.2114, abs=1e-3)


def test_chi2_rejects_non_positive_prediction():
    with pytest.raises(ValueError, match="bin 1"):
        chi2_binned(hist([1, 2]), [1.0, 0.0])


def test_small_prediction_flag():
    assert chi2_binned(hist([1, 2]), [1.0, 2.0]).small_prediction
    assert not chi2_binned(hist([10, 20]), [10.0, 20.0]).small_prediction


@settings(max_examples=50)
@given(st.lists(st.integers(0, 100), min_size=2, max_size=20), st.randoms())
def test_chi2_permutation_invariant_and_additive(counts, rnd):
    pred = np.arange(1.0, len(counts) + 1)
    base = chi2_binned(hist(counts), pred).S
    perm = list(range(len(counts)))
    rnd.shuffle(perm)
    assert chi2_binned(hist(np.array(counts)[perm]), pred[perm]).S == pytest.approx(base, rel=1e-12)
    double = chi2_binned(hist(counts + counts), np.concatenate([pred, pred])).S
    assert double == pytest.approx(2 * base, rel=1e-12)


def test_wilks_five_sigma():
    r = delta_chi2_wilks(110.0, 85.0, 1)
    assert r.delta == 25.0
    assert r.sigma == pytest.approx(5.0, abs=1e-9)
    assert r.p == pytest.approx(2 * sigma_to_p(5.0), rel=1e-9)


def test_identical_models():
    r = delta_chi2_wilks(50.0, 50.0, 1)
    assert r.delta == 0.0 and r.p == 1.0


def test_negative_delta_is_error():
    with pytest.raises(CountStatError):
        delta_chi2_wilks(10.0, 12.0, 1)


def test_difference_beats_marginal_chi2():
    # exact tails at the quoted numbers: the difference is decisive, the marginal is not
    assert stats.chi2.sf(25, 1) / 2 == pytest.approx(sigma_to_p(5.0), rel=1e-9)
    assert stats.chi2.sf(110, 99) > 0.2


def test_nested_polynomial_follows_wilks():
    x = np.arange(40) + 0.5
    mu = np.full(40, 400.0)
    data = hist(np.full(40, 400.0))
    r = chi2_difference(data, PolynomialFitter(x, 0), PolynomialFitter(x, 1), 1,
                        regime="mc-null", seed=3, n_toys=4000,
                        toy_generator=lambda rng, k: rng.poisson(mu, (k, 40)))
    # null mean about 1 and tail at the chi2_1 95% point about 5%
    assert r.null.mean() == pytest.approx(1.0, abs=0.1)
    assert np.mean(r.null >= stats.chi2.ppf(0.95, 1)) == pytest.approx(0.05, abs=0.012)


def test_peak_search_null_exceeds_three():
    x = np.arange(50) + 0.5
    mu = np.full(50, 100.0)
    var = mu
    gen = lambda rng, k: rng.poisson(mu, (k, 50))
    y = gen(stream(5), 2000).astype(float)
    d = PolynomialFitter(x, 1).chi2(y, var) - PeakFitter(x, 1, (2.0, 48.0), n_x0=40, n_sigma=6).chi2(y, var)
    mean = d.mean()
    assert mean > 3 + 3 * d.std() / math.sqrt(d.size)


def test_mc_null_pvalues_are_valid():
    x = np.arange(20) + 0.5
    mu = np.full(20, 200.0)
    gen = lambda rng, k: rng.poisson(mu, (k, 20))
    f0, f1 = PolynomialFitter(x, 0), PolynomialFitter(x, 2)
    n_toys = 400
    ps = []
    for i in range(200):
        data = hist(gen(stream(1000, i), 1)[0])
        ps.append(chi2_difference(data, f0, f1, 2, "mc-null", gen, n_toys, seed=i).p)
    ps = np.array(ps)
    for alpha in (0.1, 0.01):
        bound = alpha + 2 / math.sqrt(n_toys) + 3 * math.sqrt(alpha / len(ps))
        assert np.mean(ps <= alpha) <= bound


def test_mc_null_needs_seed():
    x = np.arange(5) + 0.5
    with pytest.raises(ValueError):
        chi2_difference(hist(np.full(5, 10.0)), PolynomialFitter(x, 0), PolynomialFitter(x, 1), 1,
                        "mc-null", lambda rng, k: rng.poisson(10, (k, 5)), 10)


def test_effective_dof_linear():
    r = effective_dof_scan(linear_family(), 50, 4000, seed=1)
    assert r.mean_S == pytest.approx(48, abs=0.5)
    assert r.effective_f == 2


def test_effective_dof_invisible_phase():
    r = effective_dof_scan(cos_phase_family(), 50, 4000, seed=2)
    assert r.effective_f == 1


def test_effective_dof_oscillation():
    r = effective_dof_scan(oscillation_family(), 50, 4000, seed=3)
    assert r.effective_f == 1


def test_energy_exhaustive_two_by_two():
    ts = TwoSample([0.0, 0.1], [1.0, 1.3])
    r = energy_test(ts)
    assert r.exhaustive and r.n_perm == 6
    assert (r.p * 6) == pytest.approx(round(r.p * 6))


def test_energy_swap_symmetry():
    rng = stream(4)
    a, b = rng.normal(size=(30, 2)), rng.normal(0.3, 1, size=(25, 2))
    assert energy_statistic(TwoSample(a, b)) == pytest.approx(energy_statistic(TwoSample(b, a)), rel=1e-12)


def test_energy_rigid_motion_and_scaling():
    rng = stream(5)
    a, b = rng.normal(size=(20, 2)), rng.normal(0.5, 1, size=(20, 2))
    th = 0.7
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shift = np.array([3.0, -2.0])
    e0 = energy_statistic(TwoSample(a, b), epsilon=1e-6)
    e1 = energy_statistic(TwoSample(a @ R.T + shift, b @ R.T + shift), epsilon=1e-6)
    assert e1 == pytest.approx(e0, rel=1e-9)
    e2 = energy_statistic(TwoSample(5 * a, 5 * b, scales=[5.0, 5.0]), epsilon=1e-6)
    assert e2 == pytest.approx(e0, rel=1e-9)


def test_energy_duplicate_points_stay_finite():
    r = energy_test(TwoSample([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]))
    assert math.isfinite(r.E)


def test_energy_detects_shift():
    rng = stream(6)
    r = energy_test(TwoSample(rng.normal(size=100), rng.normal(1.0, 1, size=100)), n_perm=199, seed=1)
    assert r.p == pytest.approx(1 / 200)


def test_energy_random_mode_needs_seed():
    rng = stream(7)
    with pytest.raises(ValueError):
        energy_test(TwoSample(rng.normal(size=20), rng.normal(size=20)))


def test_energy_dimension_mismatch():
    with pytest.raises(ValueError):
        TwoSample(np.zeros((3, 2)), np.zeros((3, 1)))

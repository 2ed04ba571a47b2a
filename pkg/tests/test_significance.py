import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from countstat.core import CountStatError, CountingModel, ModelError, Observation, sigma_to_p
from countstat.significance import (
    STRATEGIES,
    HypoStatDist,
    cls,
    cls_counting,
    cls_upper_limit,
    combine_pvalues,
    critical_count,
    median_sensitivity,
    punzi_sensitivity,
    pvalue_counting,
    pvalue_nuisance,
)


def test_counting_pvalues():
    assert pvalue_counting(0, 3.0).p == 1.0
    assert pvalue_counting(10, 3.0).p == pytest.approx(oracles.poisson_tail(10, 3.0), rel=1e-10)
    assert pvalue_counting(10, 3.0).p == pytest.approx(1.1025e-3, rel=1e-4)
    r = pvalue_counting(16, 3.0)
    assert r.p == pytest.approx(1.24e-7, rel=1e-2)
    assert r.sigma_equiv > 5


def test_conditioning_binomial():
    model = CountingModel(b_mean=10.0, b_rel_sigma=math.sqrt(0.1))
    r = pvalue_nuisance(Observation(10, b_aux=10), model, "conditioning", tau=1.0)
    assert r.p == pytest.approx(0.5881, abs=1e-4)
    assert r.p == pytest.approx(oracles.binomial_upper_tail(10, 20, 0.5), rel=1e-10)
    assert r.method == "conditioning"


def test_conditioning_default_tau_from_subsidiary_rate():
    model = CountingModel(b_mean=4.0, b_rel_sigma=0.5)  # k = 4, tau = 1
    r = pvalue_nuisance(Observation(7, b_aux=3), model, "conditioning")
    assert r.p == pytest.approx(oracles.binomial_upper_tail(7, 10, 0.5), rel=1e-10)


def test_conditioning_needs_subsidiary_count():
    with pytest.raises(ModelError):
        pvalue_nuisance(5, CountingModel(b_mean=3.0), "conditioning")


def test_supremum_needs_bounded_range():
    model = CountingModel(b_mean=3.0, b_rel_sigma=0.2)
    with pytest.raises(ModelError, match="range"):
        pvalue_nuisance(Observation(8, b_aux=25), model, "supremum")
    with pytest.raises(ModelError):
        pvalue_nuisance(Observation(8, b_aux=25), model, "supremum", b_range=(2.0, math.inf))


def test_ci_adjusted_grid_max():
    model = CountingModel(b_mean=3.0)
    r = pvalue_nuisance(16, model, "ci-adjusted", b_range=(2.5, 3.5), gamma=1e-8)
    grid = np.linspace(2.5, 3.5, 101)
    expected = max(oracles.poisson_tail(16, b) for b in grid) + 1e-8
    assert r.p == pytest.approx(expected, rel=1e-8)
    assert r.p > pvalue_nuisance(16, model, "plug-in").p


@pytest.mark.parametrize("strategy", [s for s in STRATEGIES if s != "conditioning"])
def test_strategies_collapse_without_uncertainty(strategy):
    model = CountingModel(b_mean=3.0)
    r = pvalue_nuisance(12, model, strategy, gamma=0.0)
    assert r.p == pytest.approx(pvalue_counting(12, 3.0).p, rel=1e-9)


@pytest.mark.parametrize("strategy", ["plug-in", "prior-predictive", "posterior-predictive"])
def test_strategies_converge_as_uncertainty_shrinks(strategy):
    model = CountingModel(b_mean=3.0, b_rel_sigma=1e-3)  # k = 10^6
    r = pvalue_nuisance(Observation(12, b_aux=10**6), model, strategy)
    assert r.p == pytest.approx(pvalue_counting(12, 3.0).p, rel=1e-2)


def test_prior_predictive_exceeds_plug_in_for_excess():
    model = CountingModel(b_mean=3.0, b_rel_sigma=0.2)
    obs = Observation(12, b_aux=25)
    assert pvalue_nuisance(obs, model, "prior-predictive").p > pvalue_nuisance(obs, model, "plug-in").p


def test_unknown_strategy():
    with pytest.raises(ValueError):
        pvalue_nuisance(3, CountingModel(b_mean=1.0), "bogus")


def test_product_rule_against_monte_carlo():
    r = combine_pvalues([0.5, 0.5], "product")
    assert r.p == pytest.approx(0.25 * (1 - math.log(0.25)), rel=1e-12)
    mc, err = oracles.product_rule_mc([0.5, 0.5])
    assert abs(r.p - mc) < 4 * err


def test_min_rule():
    r = combine_pvalues([1e-6, 0.1], "min")
    assert r.p == pytest.approx(1 - (1 - 1e-6) ** 2, rel=1e-9)
    mc, err = oracles.min_rule_mc([0.01, 0.2])
    assert abs(combine_pvalues([0.01, 0.2], "min").p - mc) < 4 * err


def test_combination_needs_explicit_rule_and_inputs():
    with pytest.raises(ValueError):
        combine_pvalues([0.1, 0.2], None)
    with pytest.raises(ValueError):
        combine_pvalues([], "min")
    with pytest.raises(ValueError):
        combine_pvalues([0.0, 0.2], "product")


@given(st.floats(1e-12, 1.0))
def test_null_result_weakens_product(p):
    assert combine_pvalues([p, 1.0], "product").p >= p * (1 - 1e-12)


def test_product_rule_is_not_associative():
    a, b, c = 0.01, 0.05, 0.5
    nested = combine_pvalues([combine_pvalues([a, b], "product").p, c], "product").p
    flat = combine_pvalues([a, b, c], "product").p
    assert abs(nested - flat) > 1e-6


def test_cls_basics():
    assert cls(0.3, 0.3) == 1.0
    with pytest.raises(CountStatError, match="no H0 sensitivity"):
        cls(1.0, 0.5)
    r = cls_counting(0, 3.0, 3.0)
    assert r.value == pytest.approx(math.exp(-3), abs=1e-12)
    assert r.excluded


@settings(max_examples=200)
@given(st.integers(0, 30), st.floats(0, 20), st.floats(0, 30))
def test_cls_never_below_clsb(n, b, s):
    r = cls_counting(n, b, s)
    assert r.value >= r.clsb * (1 - 1e-12)


def test_cls_approaches_clsb_when_background_tail_saturates():
    # CLs / CLsb = 1 / P(n <= n_obs | b), so they meet once that cdf nears 1
    r = cls_counting(20, 3.0, 40.0)
    assert abs(r.value - r.clsb) < 1e-2 * r.clsb


def test_cls_zero_count_is_background_free():
    r = cls_counting(0, 3.0, 20.0)
    assert r.value == pytest.approx(math.exp(-20.0), rel=1e-12)
    assert r.clsb == pytest.approx(math.exp(-23.0), rel=1e-12)


def test_cls_limit_for_zero_count():
    for b in (0.0, 1.0, 3.0):
        assert cls_upper_limit(0, b, 0.9) == pytest.approx(math.log(10), abs=1e-9)


def test_hypothesis_distributions():
    d = HypoStatDist.counting(CountingModel(b_mean=3.0), 5.0)
    assert d.h0.sum() == pytest.approx(1.0, abs=1e-8)
    # H1 stochastically dominates H0
    for t in range(0, 20):
        assert d.tail(t, "h1") >= d.tail(t, "h0") - 1e-12


def test_punzi_against_oracle():
    alpha = sigma_to_p(5.0)
    r = punzi_sensitivity(CountingModel(b_mean=3.0), alpha, 0.95)
    k, s = oracles.punzi(3.0, alpha, 0.95)
    assert r.t_crit == k == 16
    assert r.s_min == pytest.approx(s, abs=1e-6)
    assert r.alpha_actual <= alpha < oracles.poisson_tail(15, 3.0)
    assert r.power >= 0.95


def test_punzi_monotone_in_alpha():
    model = CountingModel(b_mean=3.0)
    loose = punzi_sensitivity(model, 1e-3, 0.9)
    tight = punzi_sensitivity(model, 1e-6, 0.9)
    assert tight.t_crit > loose.t_crit
    assert tight.s_min > loose.s_min


def test_punzi_zero_background():
    r = punzi_sensitivity(CountingModel(), 1e-3, 0.9)
    assert r.t_crit == 1
    assert r.s_min == pytest.approx(math.log(10), rel=1e-9)


def test_critical_count():
    assert critical_count(3.0, sigma_to_p(5.0)) == 16


def test_median_sensitivity_deterministic_model():
    assert median_sensitivity(CountingModel(), 0.9, 11, 1, "classical") == pytest.approx(math.log(10))


def test_median_sensitivity_reproducible_and_equivariant():
    model = CountingModel(b_mean=3.0)
    a = median_sensitivity(model, 0.9, 101, 42)
    assert a == median_sensitivity(model, 0.9, 101, 42)
    from countstat.coverage import draw_toys, upper_limit_fn

    lim = upper_limit_fn("bayes", model, 0.9)
    uppers = np.array([lim(o) for o in draw_toys(model, 0.0, 101, 42).observations()])
    assert np.median(1 / uppers) == pytest.approx(1 / a, rel=1e-12)


def test_median_needs_odd_toys():
    with pytest.raises(ValueError):
        median_sensitivity(CountingModel(), 0.9, 100, 1)

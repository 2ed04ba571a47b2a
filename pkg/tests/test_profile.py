import pytest

import oracles
from countstat.core import CountingModel, Observation
from countstat.profile import delta_cl, profile, profile_interval


@pytest.mark.parametrize("n,b", [(0, 0.0), (1, 0.0), (4, 0.0), (10, 3.0), (2, 3.0)])
def test_known_background_matches_closed_form(n, b):
    r = profile_interval(CountingModel(b_mean=b), n, 0.5)
    lo, hi = oracles.profile_known(n, b, 0.5)
    assert r.lower == pytest.approx(lo, abs=1e-7)
    assert r.upper == pytest.approx(hi, abs=1e-7)


def test_n0_interval_ends_at_half():
    r = profile_interval(CountingModel(), 0, 0.5)
    assert r.lower == 0.0
    assert r.upper == pytest.approx(0.5, abs=1e-10)
    # closed boundary
    assert r.contains(0.5)


def test_delta_to_cl():
    assert delta_cl(0.5) == pytest.approx(0.6827, abs=1e-4)
    assert delta_cl(1.92) == pytest.approx(0.95, abs=1e-3)


def test_efficiency_scaling_is_equivariant():
    base = profile_interval(CountingModel(), 4, 0.5)
    doubled = profile_interval(CountingModel(eff_mean=2.0), 4, 0.5)
    assert doubled.lower == pytest.approx(base.lower / 2, rel=1e-6)
    assert doubled.upper == pytest.approx(base.upper / 2, rel=1e-6)


def test_efficiency_uncertainty_widens_interval():
    exact = profile_interval(CountingModel(b_mean=3.0), 10, 0.5)
    fuzzy = profile_interval(CountingModel(b_mean=3.0, eff_rel_sigma=0.1), 10, 0.5)
    assert fuzzy.lower < exact.lower
    assert fuzzy.upper > exact.upper


def test_profile_peak_at_nominal_subsidiary():
    curve = profile(CountingModel(b_mean=3.0, eff_rel_sigma=0.1), 10)
    assert curve.s_hat == pytest.approx(7.0, abs=1e-4)


def test_background_uncertainty_profiled():
    model = CountingModel(b_mean=3.0, b_rel_sigma=0.2, eff_rel_sigma=0.1)
    obs = Observation(10, b_aux=25, eff_aux=100)
    r = profile_interval(model, obs, 0.5)
    exact = profile_interval(CountingModel(b_mean=3.0, eff_rel_sigma=0.1), 10, 0.5)
    assert r.lower < exact.lower and r.upper > exact.upper


def test_bad_delta():
    with pytest.raises(ValueError):
        profile_interval(CountingModel(), 3, 0.0)

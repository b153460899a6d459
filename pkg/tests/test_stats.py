import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kolmogorov_series_oracle, ks_d_oracle, poisson_oracle

from geoproto.errors import DataError, InsufficientDataError
from geoproto.grid import window_at
from geoproto.stats import (HIGHER, LOWER, NONE, BaselineDist, chi2_1_sf, feature_refs, fit_baseline,
                            fit_local_baseline, kolmogorov_sf, ks_test, poisson_lrt, poisson_outcome,
                            run_test)

# values frozen from the oracles in tests/oracles.py
POIS_20_10 = (7.725887222397812, 0.005443460383477074)
POIS_0_5 = (10.0, 0.0015654022580025497)


def test_frozen_oracle_values_still_hold():
    assert poisson_oracle(20, 10) == pytest.approx(POIS_20_10, abs=1e-15)
    assert poisson_oracle(0, 5) == pytest.approx(POIS_0_5, abs=1e-15)


def test_poisson_equal_counts():
    r = poisson_outcome(10, 10, 0.05)
    assert (r.statistic, r.p_value, r.significant, r.direction) == (0.0, 1.0, False, NONE)


def test_poisson_double_rate():
    r = poisson_outcome(20, 10, 0.05)
    assert r.statistic == pytest.approx(POIS_20_10[0], abs=1e-12)
    assert r.p_value == pytest.approx(POIS_20_10[1], abs=1e-12)
    assert r.significant and r.direction == HIGHER


def test_poisson_zero_count():
    r = poisson_outcome(0, 5, 0.05)
    assert r.statistic == pytest.approx(10.0, abs=1e-12)
    assert r.p_value == pytest.approx(POIS_0_5[1], abs=1e-12)
    assert r.significant and r.direction == LOWER


def test_poisson_zero_baseline():
    assert poisson_outcome(3, 0, 0.05).significant
    assert not poisson_outcome(0, 0, 0.05).significant


def test_poisson_lrt_scales_by_cells():
    base = BaselineDist("f", "global", "poisson", 2.0)
    assert poisson_lrt(40, 10, base) == poisson_outcome(40, 20.0, 0.05)
    with pytest.raises(DataError):
        poisson_lrt(1, 0, base)


def test_chi2_sf_known_point():
    assert chi2_1_sf(3.841458820694124) == pytest.approx(0.05, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(c=st.integers(0, 500), b=st.floats(0.01, 300))
def test_poisson_properties(c, b):
    r = poisson_outcome(c, b, 0.05)
    assert r.statistic >= 0 and 0 <= r.p_value <= 1
    if c != b:
        stat, p = poisson_oracle(c, b)
        assert r.statistic == pytest.approx(stat, abs=1e-9)
        assert r.p_value == pytest.approx(p, abs=1e-8)
        assert r.direction == (HIGHER if c > b else LOWER)


@settings(max_examples=100, deadline=None)
@given(b=st.floats(1, 50), c1=st.integers(0, 200), c2=st.integers(0, 200))
def test_poisson_statistic_monotone_away_from_b(b, c1, c2):
    lo, hi = sorted((c1, c2))
    if lo >= b:
        assert poisson_outcome(hi, b, 0.05).statistic >= poisson_outcome(lo, b, 0.05).statistic - 1e-12
    if hi <= b:
        assert poisson_outcome(lo, b, 0.05).statistic >= poisson_outcome(hi, b, 0.05).statistic - 1e-12


def emp(values):
    return fit_baseline(values, "f", "empirical", "global")


def test_ks_identical_samples_tie_convention():
    r = ks_test([1, 2, 3], emp([1, 2, 3]))
    assert r.statistic == pytest.approx(1 / 3, abs=1e-15)
    assert r.statistic == ks_d_oracle([1, 2, 3], [1, 2, 3])
    assert r.direction == NONE and not r.significant


def test_ks_window_above_baseline():
    r = ks_test([10, 11, 12], emp([1, 2, 3]))
    assert r.statistic == 1.0
    assert r.p_value == pytest.approx(kolmogorov_series_oracle(3, 1.0), abs=1e-12)
    assert r.p_value == pytest.approx(2 * math.exp(-6), rel=1e-3)
    assert r.significant and r.direction == HIGHER


def test_ks_constant_window_equal_to_constant_baseline():
    r = ks_test([4, 4], emp([4, 4, 4]))
    assert r.direction == NONE and not r.significant


def test_kolmogorov_sf_limits():
    assert kolmogorov_sf(10, 0.0) == 1.0
    assert kolmogorov_sf(10, 1.0) < 1e-8
    assert kolmogorov_sf(10_000, 1e-5) == pytest.approx(1.0)


@settings(max_examples=150, deadline=None)
@given(window=st.lists(st.integers(-5, 5), min_size=1, max_size=30),
       base=st.lists(st.integers(-5, 5), min_size=2, max_size=60))
def test_ks_matches_gap_enumeration(window, base):
    w = [float(v) for v in window]
    b = [float(v) for v in base]
    r = ks_test(w, emp(b))
    d = ks_d_oracle(w, b)
    assert r.statistic == pytest.approx(d, abs=1e-12)
    assert 1 / (2 * len(w)) - 1e-12 <= r.statistic <= 1.0
    assert r.p_value == pytest.approx(kolmogorov_series_oracle(len(w), d), abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(window=st.lists(st.floats(-10, 10), min_size=1, max_size=20),
       base=st.lists(st.floats(-10, 10), min_size=2, max_size=40), seed=st.integers(0, 1000))
def test_ks_invariant_to_input_order(window, base, seed):
    rng = np.random.default_rng(seed)
    a = ks_test(window, emp(base))
    b = ks_test(rng.permutation(window), emp(rng.permutation(base)))
    assert a == b


def test_ks_rejects_empty_window():
    with pytest.raises(DataError):
        ks_test([], emp([1, 2]))


def test_run_test_dispatch():
    pb = BaselineDist("f", "global", "poisson", 1.0)
    assert run_test("poisson", np.array([3.0, 3.0]), pb, 0.05) == poisson_outcome(6.0, 2.0, 0.05)
    eb = emp([0.0, 1.0])
    assert run_test("empirical", np.array([5.0]), eb, 0.05) == ks_test([5.0], eb)
    with pytest.raises(DataError):
        run_test("bogus", np.array([1.0]), pb, 0.05)


def test_fit_poisson_rate():
    assert fit_baseline([2, 2, 2, 2], "f", "poisson", "global").rate == 2.0


def test_fit_empirical_sorted():
    b = fit_baseline([3, 1], "f", "empirical", "global")
    assert b.values.tolist() == [1.0, 3.0] and b.mean == 2.0


def test_fit_negative_count_rejected():
    with pytest.raises(DataError, match="negative"):
        fit_baseline([5, -1], "f", "poisson", "global")


def test_fit_needs_two_values():
    with pytest.raises(InsufficientDataError):
        fit_baseline([1.0], "f", "poisson", "local")


def test_compression_keeps_quantiles():
    vals = np.arange(5000, dtype=float)
    b = fit_baseline(vals, "f", "empirical", "global", compress_threshold=1000)
    assert b.values.size == 1024 and b.values[0] == 0 and b.values[-1] == 4999
    assert b.n_obs == 5000 and b.mean == vals.mean()


def test_constant_spatial_feature_rate(tiny_ds):
    s = window_at(tiny_ds, 1, 4, 4, d=9, t_in=1)
    s.x_st[...] = 4.0
    ref = [r for r in feature_refs(tiny_ds.features) if r.kind == "spatiotemporal"][0]
    assert fit_local_baseline(s, ref).rate == 4.0


def test_local_baseline_uses_valid_cells_only(tiny_ds):
    s = window_at(tiny_ds, 1, 0, 0, d=9, t_in=1)
    ref = [r for r in feature_refs(tiny_ds.features) if r.kind == "spatial"][0]
    b = fit_local_baseline(s, ref)
    assert b.n_obs == 25
    expected = np.sort(tiny_ds.F_S[:5, :5, 0].astype(np.float64).ravel())
    np.testing.assert_array_equal(b.values, expected)
    assert fit_local_baseline(s, ref, literal=True).n_obs == 81


def test_all_masked_window_is_insufficient(tiny_ds):
    s = window_at(tiny_ds, 1, 0, 0, d=9, t_in=1)
    s.mask[...] = False
    ref = feature_refs(tiny_ds.features)[1]
    with pytest.raises(InsufficientDataError):
        fit_local_baseline(s, ref)

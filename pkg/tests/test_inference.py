import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from panelcf.inference import (
    EffectSeries,
    block_bootstrap_band,
    circular_block_indices,
    compute_effects,
    optimal_block_length,
    permutation_test,
    randomization_tests,
    s_stat,
)
from panelcf.panel import PanelError, TreatmentPlan

from conftest import make_panel

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)


def _series(traj, t0):
    traj = np.asarray(traj, dtype=float)
    return EffectSeries(traj[None, :], traj, t0)


def _ar1(n, phi, rng):
    e = rng.normal(size=n)
    x = np.zeros(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


# --- effects ---------------------------------------------------------------------

def test_effects_examples():
    Y = np.arange(12.0).reshape(3, 4)
    panel = make_panel(Y)
    plan = TreatmentPlan({"u01": 2, "u02": 2}, panel.unit_ids)
    eff = compute_effects(panel, Y, plan)
    assert not eff.alpha_bar.any()
    Y_hat = Y.copy()
    Y_hat[1] -= [1, 1, 3, 3]
    Y_hat[2] -= [3, 3, 5, 5]
    eff = compute_effects(panel, Y_hat, plan)
    np.testing.assert_array_equal(eff.alpha_bar, [2, 2, 4, 4])
    assert eff.t0_index == 2
    np.testing.assert_array_equal(eff.window, [4, 4])
    one = compute_effects(panel, Y_hat, TreatmentPlan({"u01": 2}, panel.unit_ids))
    np.testing.assert_array_equal(one.alpha_bar, [1, 1, 3, 3])


def test_effects_pooled_t0_and_event_time():
    Y = np.zeros((3, 6))
    panel = make_panel(Y)
    Y_hat = -np.array([[0.0] * 6, [0, 0, 1, 1, 1, 1], [0, 0, 0, 0, 1, 1]])
    plan = TreatmentPlan({"u01": 2, "u02": 4}, panel.unit_ids)
    eff = compute_effects(panel, Y_hat, plan)
    assert eff.t0_index == 2  # earliest adoption
    assert compute_effects(panel, Y_hat, plan, pooled_t0=4).t0_index == 4
    ev = compute_effects(panel, Y_hat, plan, event_time=True)
    # both units aligned on their own adoption: two leads, two lags in common
    np.testing.assert_array_equal(ev.alpha, [[0, 0, 1, 1], [0, 0, 1, 1]])
    assert ev.time_ids == (-1, 0, 1, 2)
    assert ev.t0_index == 2


def test_effects_errors():
    panel = make_panel(np.zeros((2, 3)))
    with pytest.raises(PanelError, match="does not match"):
        compute_effects(panel, np.zeros((2, 2)), TreatmentPlan({"u01": 1}, panel.unit_ids))


# --- statistic -------------------------------------------------------------------

def test_s_stat_examples():
    assert s_stat(np.zeros(5), 1) == 0.0
    assert s_stat(np.ones(4), 1) == pytest.approx(2.0)
    assert s_stat(np.ones(4), 2) == pytest.approx(4.0)
    # q = 2 on (3, 4): ((9 + 16) / sqrt 2)^2 = 625 / 2
    assert s_stat([3.0, -4.0], 2) == pytest.approx(312.5)
    with pytest.raises(ValueError):
        s_stat([], 1)
    with pytest.raises(ValueError):
        s_stat([1.0], 0)


@given(hnp.arrays(float, st.integers(1, 20), elements=finite), st.sampled_from([0.5, 1.0, 2.0, 3.0]), st.data())
def test_s_stat_properties(a, q, data):
    a[np.abs(a) < 1e-6] = 0.0  # keep |a|^q^q clear of underflow
    s = s_stat(a, q)
    assert s >= 0
    assert (s == 0) == (not np.any(a))
    assert s_stat(-a, q) == pytest.approx(s, rel=1e-12)
    signs = data.draw(hnp.arrays(float, a.shape, elements=st.sampled_from([-1.0, 1.0])))
    assert s_stat(a * signs, q) == pytest.approx(s, rel=1e-12)
    j = data.draw(st.integers(0, a.size - 1))
    bigger = a.copy()
    bigger[j] = np.sign(a[j] or 1.0) * (abs(a[j]) + 1.0)
    assert s_stat(bigger, q) >= s


# --- permutation test ------------------------------------------------------------

def test_p_zero_when_observed_dominates():
    traj = np.r_[np.zeros(20), 5.0]
    r = permutation_test(_series(traj, 20), "moving_block", q=1)
    # every shift moves a zero into the window
    assert r.p_values["moving_block"] == 0.0


def test_p_one_when_all_equal():
    r = permutation_test(_series(np.ones(12), 9), "iid", n_permutations=50, q=1)
    assert r.p_values["iid"] == 1.0
    r = permutation_test(_series(np.zeros(12), 9), "moving_block", q=2)
    assert r.p_values["moving_block"] == 1.0


def test_moving_block_count():
    rng = np.random.default_rng(0)
    r = permutation_test(_series(rng.normal(size=159), 120), "moving_block", n_permutations=5)
    assert r.n_permutations["moving_block"] == 158


def test_reordered_window_ties():
    # a permutation that only reorders the post window must not count as smaller
    traj = np.r_[np.zeros(5), 0.1, 0.2, 0.3, 1e-3, 7.7]
    r = permutation_test(_series(traj, 5), "iid", 2000, 1.0, 0)
    s = r.null_stats["iid"]
    same = s[np.isclose(s, r.s_observed, rtol=1e-12)]
    assert np.all(same == r.s_observed)


def test_p_value_matches_brute_force():
    rng = np.random.default_rng(1)
    traj = rng.normal(size=15)
    t0 = 11
    r = permutation_test(_series(traj, t0), "moving_block", q=1)
    s_obs = np.abs(traj[t0:]).sum() / 2.0
    less = sum(np.abs(np.roll(traj, k)[t0:]).sum() / 2.0 < s_obs for k in range(1, 15))
    assert r.s_observed == pytest.approx(s_obs)
    assert r.p_values["moving_block"] == pytest.approx(1 - less / 14)


def test_iid_block_partition_and_errors():
    rng = np.random.default_rng(2)
    eff = _series(rng.normal(size=23), 18)
    r = permutation_test(eff, "iid_block", n_permutations=30, block_length=5)
    assert r.block_length == 5
    with pytest.raises(ValueError, match="exceeds"):
        permutation_test(eff, "iid_block", block_length=24)
    with pytest.raises(ValueError):
        permutation_test(eff, "iid", n_permutations=0)
    with pytest.raises(ValueError, match="scheme"):
        permutation_test(eff, "bogus")


def test_null_trajectory_subtracted():
    traj = np.r_[np.zeros(10), 2.0, 3.0]
    r = permutation_test(_series(traj, 10), "moving_block", null=[2.0, 3.0])
    assert r.s_observed == 0.0
    assert r.p_values["moving_block"] == 1.0


@given(st.integers(0, 1000), st.floats(0.01, 100.0), st.sampled_from(["iid", "iid_block", "moving_block"]))
def test_p_value_scale_invariant_and_deterministic(seed, c, scheme):
    rng = np.random.default_rng(seed)
    traj = rng.normal(size=30)
    a = permutation_test(_series(traj, 24), scheme, 100, 1.0, seed)
    b = permutation_test(_series(c * traj, 24), scheme, 100, 1.0, seed)
    again = permutation_test(_series(traj, 24), scheme, 100, 1.0, seed)
    assert a.p_values == b.p_values == again.p_values
    assert 0.0 <= a.p_values[scheme] <= 1.0


def test_randomization_tests_child_seeds():
    rng = np.random.default_rng(3)
    eff = _series(rng.normal(size=40), 30)
    full = randomization_tests(eff, qs=(1.0, 2.0), n_permutations=200, seed=5)
    only = randomization_tests(eff, qs=(1.0, 2.0), schemes=["iid"], n_permutations=200, seed=5)
    assert [r.q for r in full] == [1.0, 2.0]
    for a, b in zip(full, only):
        assert a.p_values["iid"] == b.p_values["iid"]
        assert set(a.p_values) == {"iid", "iid_block", "moving_block"}


def test_iid_size_on_null_trajectories():
    # exchangeable trajectories: rejection rate at 0.05 sits near nominal
    rng = np.random.default_rng(4)
    rejections = 0
    for k in range(200):
        r = permutation_test(_series(rng.normal(size=40), 30), "iid", 500, 1.0, k)
        rejections += r.p_values["iid"] <= 0.05
    assert 0.02 <= rejections / 200 <= 0.09


# --- block length ----------------------------------------------------------------

def test_block_length_constant_and_short():
    assert optimal_block_length(np.full(50, 3.0)) == 1
    with pytest.raises(ValueError):
        optimal_block_length(np.arange(5.0))


def test_block_length_white_noise_and_ar1():
    rng = np.random.default_rng(5)
    wn = [optimal_block_length(rng.normal(size=200)) for _ in range(200)]
    ar = [optimal_block_length(_ar1(200, 0.9, rng)) for _ in range(200)]
    assert np.mean(np.array(wn) <= 6) >= 0.95
    assert np.median(ar) > np.median(wn)


@given(hnp.arrays(float, st.integers(10, 80), elements=finite))
def test_block_length_clamped(x):
    b = optimal_block_length(x)
    assert 1 <= b <= math.ceil(x.size / 3)


def test_block_length_matches_arch():
    # arch normalizes autocorrelations slightly differently, so a few borderline
    # bandwidth choices differ; the block lengths agree on the bulk of series
    arch = pytest.importorskip("arch.bootstrap")
    rng = np.random.default_rng(6)
    same = []
    for _ in range(100):
        n = int(rng.integers(30, 300))
        x = _ar1(n, rng.uniform(-0.5, 0.95), rng)
        ref = arch.optimal_block_length(x)["circular"].iloc[0]
        same.append(optimal_block_length(x) == int(min(max(round(ref), 1), math.ceil(n / 3))))
    assert np.mean(same) >= 0.9


# --- bootstrap band --------------------------------------------------------------

def test_circular_indices_wrap():
    idx = circular_block_indices(10, 4, np.random.default_rng(0))
    assert idx.size == 10
    for block in (idx[:4], idx[4:8]):
        assert np.all(np.diff(block) % 10 == 1)


def test_band_zero_variance():
    band = block_bootstrap_band(np.full((2, 30), 1.5), B=100)
    assert not band.se.any()
    np.testing.assert_array_equal(band.ci_low, band.ci_high)
    with pytest.raises(ValueError):
        block_bootstrap_band(np.zeros((1, 30)), B=99)


def test_band_standard_normal_se():
    rng = np.random.default_rng(7)
    band = block_bootstrap_band(rng.normal(size=(1, 200)), B=1000, seed=1)
    assert np.all(np.abs(band.se - 1.0) < 0.25)


def test_band_coverage_of_constant_effect():
    rng = np.random.default_rng(8)
    covered = []
    for k in range(100):
        alpha = 0.7 + rng.normal(size=(3, 60))
        band = block_bootstrap_band(alpha, B=200, seed=k)
        covered.append(np.mean((band.ci_low <= 0.7) & (0.7 <= band.ci_high)))
    assert np.mean(covered) >= 0.85

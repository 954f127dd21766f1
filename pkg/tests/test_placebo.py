import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panelcf.panel import PanelError, TreatmentPlan
from panelcf.placebo import (
    PlaceboConfig,
    PlaceboReport,
    SyntheticSpec,
    backdate,
    backdating_test,
    generate_synthetic_panel,
    placebo_assignment,
    plant_effect,
    run_placebo_suite,
)

from conftest import make_panel


def _oracle(panel, mask, covariates, seed):
    return panel.values


# --- generator -------------------------------------------------------------------

@pytest.mark.parametrize("rank", [1, 3, 5])
def test_generator_exact_rank(rank):
    panel, truth = generate_synthetic_panel(SyntheticSpec(N=12, T=15, rank=rank, noise_sd=0.0))
    assert np.linalg.matrix_rank(panel.values) == rank
    np.testing.assert_array_equal(panel.values, truth.L)


def test_generator_deterministic_and_components():
    spec = SyntheticSpec(N=10, T=20, rank=2, noise_sd=0.3, effects=True, seed=9)
    a, ta = generate_synthetic_panel(spec)
    b, _ = generate_synthetic_panel(spec)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.unit_ids == b.unit_ids
    np.testing.assert_allclose(a.values, ta.signal + ta.noise, atol=1e-12)
    np.testing.assert_allclose(ta.signal, ta.L + ta.gamma[:, None] + ta.delta[None, :], atol=1e-12)
    c, _ = generate_synthetic_panel(SyntheticSpec(N=10, T=20, rank=2, noise_sd=0.3, effects=True, seed=10))
    assert not np.array_equal(a.values, c.values)


def test_generator_noise_mean():
    sd, n, t = 0.7, 60, 80
    _, truth = generate_synthetic_panel(SyntheticSpec(N=n, T=t, rank=2, noise_sd=sd, seed=1))
    assert abs(truth.noise.mean()) < 4 * sd / np.sqrt(n * t)
    assert truth.noise.std() == pytest.approx(sd, rel=0.05)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(N=5, T=4, rank=5)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_sd=-1.0)


def test_plant_effect():
    panel = make_panel(np.zeros((3, 4)))
    mask = placebo_assignment(3, 4, 0.5, PlaceboConfig(treated_fraction=0.34, adoption="simultaneous"),
                              np.random.default_rng(0))
    out = plant_effect(panel, mask, 2.5)
    np.testing.assert_array_equal(out.values, 2.5 * mask.entries)


# --- assignment ------------------------------------------------------------------

@given(st.integers(4, 40), st.integers(10, 80), st.sampled_from([0.25, 0.5, 0.75]),
       st.sampled_from(["staggered", "simultaneous"]), st.integers(0, 2**31))
def test_assignment_properties(n, t, ratio, adoption, seed):
    cfg = PlaceboConfig(adoption=adoption)
    mask = placebo_assignment(n, t, ratio, cfg, np.random.default_rng(seed))
    mask.validate()
    pre = mask.pre_lengths()
    treated = pre < t
    assert treated.sum() == round(0.5 * n)
    assert np.all(pre[treated] >= 1)
    lo, hi = ratio * t - 0.1 * t, ratio * t + 0.1 * t
    assert np.all((pre[treated] >= np.floor(lo)) & (pre[treated] <= np.ceil(hi)))
    if adoption == "simultaneous":
        assert np.unique(pre[treated]).size == 1


def test_assignment_errors():
    with pytest.raises(PanelError):
        placebo_assignment(3, 10, 0.5, PlaceboConfig(treated_fraction=0.1), np.random.default_rng(0))
    with pytest.raises(PanelError):
        placebo_assignment(3, 10, 0.5, PlaceboConfig(treated_fraction=0.9), np.random.default_rng(0))
    with pytest.raises(ValueError):
        PlaceboConfig(t0_ratios=(0.0, 0.5))
    with pytest.raises(ValueError):
        PlaceboConfig(treated_fraction=1.0)
    with pytest.raises(ValueError):
        PlaceboConfig(adoption="sometimes")


# --- suite -----------------------------------------------------------------------

def test_oracle_estimator_zero_and_zero_width():
    panel, _ = generate_synthetic_panel(SyntheticSpec(N=10, T=20, rank=2, seed=2))
    cfg = PlaceboConfig(n_trials=4, estimators=("ORACLE",))
    rep = run_placebo_suite(panel, cfg, custom={"ORACLE": _oracle})
    assert (rep.trials.rmse == 0).all()
    s = rep.summary
    assert (s["n"] == 4).all()
    assert (s["lower"] == s["mean"]).all() and (s["upper"] == s["mean"]).all()


def test_constant_panel_every_estimator_zero():
    panel = make_panel(np.full((8, 12), 3.25))
    rep = run_placebo_suite(panel, PlaceboConfig(n_trials=2, t0_ratios=(0.5,)))
    assert set(rep.trials.estimator) == {"DID", "HR-EN", "MC-NNM", "PCA", "SC-ADH", "SVD", "VT-EN"}
    np.testing.assert_allclose(rep.trials.rmse, 0.0, atol=1e-8)


def test_suite_invariant_to_estimator_order_and_threads():
    panel, _ = generate_synthetic_panel(SyntheticSpec(N=10, T=20, rank=2, noise_sd=0.1, seed=3))
    custom = {"ORACLE": _oracle}
    a = run_placebo_suite(panel, PlaceboConfig(n_trials=3, estimators=("DID", "ORACLE", "VT-EN")), custom=custom)
    b = run_placebo_suite(panel, PlaceboConfig(n_trials=3, estimators=("VT-EN", "DID", "ORACLE")), custom=custom,
                          threads=2)
    pd.testing.assert_frame_equal(a.trials, b.trials)
    assert len(a.trials) == 3 * 3 * 3
    assert a.trials.groupby(["estimator", "ratio"]).size().eq(3).all()


def test_summary_interval_contains_mean():
    trials = pd.DataFrame({"estimator": ["A"] * 3, "ratio": [0.5] * 3, "trial": [0, 1, 2], "rmse": [1.0, 2.0, 3.0]})
    s = PlaceboReport(trials).summary.iloc[0]
    assert s["mean"] == 2.0 and s["sd"] == 1.0
    assert s["lower"] == pytest.approx(2.0 - 1.96) and s["upper"] == pytest.approx(2.0 + 1.96)


def test_suite_rejects_incomplete_panel_and_unknown_estimator():
    values = np.ones((4, 6))
    values[0, 0] = np.nan
    with pytest.raises(PanelError):
        run_placebo_suite(make_panel(values))
    with pytest.raises(ValueError):
        run_placebo_suite(make_panel(np.ones((4, 6))), PlaceboConfig(estimators=("NOPE",)))


def test_suite_more_pre_periods_help_low_rank():
    # monotone-information property on a small rank-3 panel for the low-rank estimators
    panel, _ = generate_synthetic_panel(SyntheticSpec(N=12, T=30, rank=3, noise_sd=0.1, seed=4))
    rep = run_placebo_suite(panel, PlaceboConfig(n_trials=3, t0_ratios=(0.25, 0.75), estimators=("SVD", "DID")))
    for name in ("SVD", "DID"):
        assert rep.mean(name, 0.75) <= rep.mean(name, 0.25) + 2 * rep.sd(name, 0.25)


# --- backdating ------------------------------------------------------------------

def _plan(panel, q, adopt):
    return TreatmentPlan({u: adopt for u in panel.unit_ids[-q:]}, panel.unit_ids)


def test_backdate_shapes():
    panel = make_panel(np.arange(40.0).reshape(4, 10))
    plan = TreatmentPlan({"u02": 6, "u03": 8}, panel.unit_ids)
    short, bplan = backdate(panel, plan, 2)
    # pooled pre-period is 6 columns; both adopt after column 4
    assert short.shape == (4, 6)
    assert bplan.adoption_time == {"u02": 4, "u03": 4}
    with pytest.raises(PanelError, match="no pre-period"):
        backdate(panel, plan, 6)
    with pytest.raises(ValueError):
        backdate(panel, plan, 0)


def test_backdating_table_layout():
    panel, _ = generate_synthetic_panel(SyntheticSpec(N=10, T=30, rank=2, noise_sd=0.2, seed=5))
    tab = backdating_test(panel, _plan(panel, 3, 25), taus=(1, 5), qs=(1.0, 2.0), n_permutations=50,
                          estimator="DID")
    assert list(tab.columns) == ["tau", "q", "scheme", "s_observed", "p_value"]
    assert len(tab) == 2 * 2 * 3
    assert tab.p_value.between(0, 1).all()
    with pytest.raises(PanelError):
        backdating_test(panel, _plan(panel, 3, 25), taus=(25,), estimator="DID")


def test_backdating_custom_callable_and_perfect_fit():
    panel, _ = generate_synthetic_panel(SyntheticSpec(N=8, T=30, rank=2, seed=6))
    tab = backdating_test(panel, _plan(panel, 2, 25), taus=(5,), estimator=_oracle, n_permutations=20)
    assert (tab.s_observed == 0).all() and (tab.p_value == 1).all()
    with pytest.raises(ValueError):
        backdating_test(panel, _plan(panel, 2, 25), taus=(5,), estimator=_oracle, refit=True)


def test_backdating_null_rate_with_refit():
    # zero effect, low-rank truth: p > 0.05 in at least 90% of panels at tau = 10
    keep = []
    for s in range(40):
        panel, _ = generate_synthetic_panel(SyntheticSpec(N=20, T=50, rank=2, noise_sd=0.5, seed=s))
        tab = backdating_test(panel, _plan(panel, 5, 45), taus=(10,), qs=(1.0,), schemes=("iid",),
                              seed=s, n_permutations=500, refit=True)
        keep.append(tab.p_value.iloc[0] > 0.05)
    assert np.mean(keep) >= 0.9

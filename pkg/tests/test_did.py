import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergerretro.did import (
    DidSpec,
    Differencing,
    TrendMethod,
    TrendMode,
    aggregate_event_effects,
    did_first_difference_event_study,
    did_fixed_effects,
    did_with_trends,
    event_weights,
    percent_transform,
)
from mergerretro.errors import IdentificationError, PanelError

from conftest import grid_panel

FD = DidSpec(differencing=Differencing.FIRST_DIFFERENCE, event_horizon=1)


def four_means(y, treated_rows, post_cols):
    """Double difference of group-period means on a balanced outcome grid."""
    trt, ctl = y[treated_rows], np.delete(y, treated_rows, axis=0)
    pre = ~post_cols
    return (trt[:, post_cols].mean() - trt[:, pre].mean()) - (ctl[:, post_cols].mean() - ctl[:, pre].mean())


def test_two_by_two_four_means():
    data = grid_panel([[10, 12], [8, 9]], treated=[0], merger_quarter=1)
    rep = did_fixed_effects(data)
    assert rep["beta_did"] == pytest.approx(1.0, abs=1e-12)
    assert rep.names == ["beta_did"] and rep.n_clusters == 2


def test_additive_panel_has_zero_effect():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(6, 1)) + rng.normal(size=(1, 8))
    rep = did_fixed_effects(grid_panel(y + 5, treated=[0, 1, 2], merger_quarter=4))
    assert abs(rep["beta_did"]) < 1e-10


def test_injected_effect_on_log_price():
    rng = np.random.default_rng(42)
    n_markets, n_quarters, effect = 100, 16, -0.04
    log_p = 0.5 + rng.normal(0, 0.3, (n_markets, 1)) + rng.normal(0, 0.05, (1, n_quarters))
    log_p = log_p + rng.normal(0, 0.01, (n_markets, n_quarters))
    treated = list(range(30))
    log_p[:30, 8:] += effect
    data = grid_panel(np.exp(log_p), treated=treated, merger_quarter=8)
    rep = did_fixed_effects(data, DidSpec(log_outcome=True))
    assert abs(rep["beta_did"] - effect) < 3 * rep.se_of("beta_did")
    post = np.arange(n_quarters) >= 8
    assert rep["beta_did"] == pytest.approx(four_means(log_p, treated, post), abs=1e-10)


def test_controls_enter_the_regression(sim_panel):
    rep = did_fixed_effects(sim_panel, DidSpec(controls=("w_1", "w_2")))
    assert rep.names == ["beta_did", "w_1", "w_2"]
    assert np.all(np.linalg.eigvalsh(rep.vcov) >= -1e-14)
    np.testing.assert_allclose(rep.se, np.sqrt(np.diag(rep.vcov)))


def test_collinear_controls_raise(sim_panel):
    frame = sim_panel.frame.assign(x_dup=sim_panel.frame["w_1"] * 2.0, x_one=sim_panel.frame["w_1"])
    data = sim_panel.with_frame(frame)
    with pytest.raises(IdentificationError, match="collinear"):
        did_fixed_effects(data, DidSpec(controls=("x_one", "x_dup")))


def test_no_treated_observations_raise():
    data = grid_panel(np.ones((3, 4)) + np.arange(4), treated=[], merger_quarter=2)
    with pytest.raises(IdentificationError, match="no treated"):
        did_fixed_effects(data)


def test_cr1_matches_hand_computation():
    rng = np.random.default_rng(7)
    y = rng.normal(size=(5, 2)) + 20
    rep = did_fixed_effects(grid_panel(y, treated=[0, 1], merger_quarter=1))
    # Two periods: FE-DiD is OLS of market differences on [1, treated].
    dy = y[:, 1] - y[:, 0]
    X = np.column_stack([np.ones(5), np.array([1, 1, 0, 0, 0.0])])
    beta = np.linalg.solve(X.T @ X, X.T @ dy)
    assert rep["beta_did"] == pytest.approx(beta[1], abs=1e-12)


def trend_panel(kappa_treated, kappa_control, n_pre=4, n_post=4, n_per_group=3, market_noise=None):
    t = np.arange(n_pre + n_post, dtype=float)
    kappas = np.r_[np.full(n_per_group, kappa_treated), np.full(n_per_group, kappa_control)]
    if market_noise is not None:
        kappas = kappas + market_noise
    y = 10 + np.arange(2 * n_per_group)[:, None] + kappas[:, None] * t[None, :]
    return grid_panel(y, treated=range(n_per_group), merger_quarter=n_pre), kappas


def test_plain_did_trend_bias_closed_form():
    # Pre-window mean sits 4 quarters before the post-window mean.
    data, _ = trend_panel(0.3, 0.1)
    assert did_fixed_effects(data)["beta_did"] == pytest.approx(4 * (0.3 - 0.1), abs=1e-10)


@pytest.mark.parametrize("mode", [TrendMode.GROUP, TrendMode.MARKET])
@pytest.mark.parametrize("method", [TrendMethod.JOINT, TrendMethod.PRE_ESTIMATE])
def test_trend_methods_remove_group_trend(mode, method):
    data, _ = trend_panel(0.3, 0.1)
    rep = did_with_trends(data, DidSpec(trend_mode=mode, trend_method=method))
    assert abs(rep["beta_did"]) < 1e-8
    assert rep.diagnostics["trend_mode"] == mode.value
    assert rep.method == ("trends_joint" if method is TrendMethod.JOINT else "trends_pre_estimate")


def test_market_trends_pre_estimate_noiseless_market_specific():
    data, _ = trend_panel(0.3, 0.1, market_noise=np.linspace(-0.05, 0.05, 6))
    rep = did_with_trends(data, DidSpec(trend_mode=TrendMode.MARKET, trend_method=TrendMethod.PRE_ESTIMATE))
    assert abs(rep["beta_did"]) < 1e-10


def test_market_trends_joint_recovers_effect_under_noise():
    rng = np.random.default_rng(11)
    t = np.arange(8.0)
    kappa = np.r_[np.full(20, 0.3), np.full(40, 0.1)] + rng.normal(0, 0.02, 60)
    y = 5 + rng.normal(size=(60, 1)) + kappa[:, None] * t + rng.normal(0, 0.05, (60, 8))
    data = grid_panel(y, treated=range(20), merger_quarter=4)
    rep = did_with_trends(data, DidSpec(trend_mode=TrendMode.MARKET))
    assert abs(rep["beta_did"]) < 3 * rep.se_of("beta_did")


def test_trends_degenerate_to_plain_did():
    rng = np.random.default_rng(3)
    y = 20 + rng.normal(size=(8, 1)) + rng.normal(size=(1, 8))
    y[:3, 4:] += 0.5
    data = grid_panel(y, treated=range(3), merger_quarter=4)
    base = did_fixed_effects(data)["beta_did"]
    for mode in (TrendMode.GROUP, TrendMode.MARKET):
        for method in TrendMethod:
            rep = did_with_trends(data, DidSpec(trend_mode=mode, trend_method=method))
            assert rep["beta_did"] == pytest.approx(base, abs=1e-8)


def test_pre_estimate_needs_two_pre_quarters():
    data = grid_panel(np.ones((3, 4)) + np.arange(4), treated=[0], merger_quarter=1)
    with pytest.raises(PanelError, match="fewer than 2 pre-merger"):
        did_with_trends(data, DidSpec(trend_mode=TrendMode.MARKET, trend_method=TrendMethod.PRE_ESTIMATE))


def test_trend_options_require_fixed_effects():
    with pytest.raises(ValueError):
        DidSpec(trend_mode=TrendMode.GROUP, differencing=Differencing.FIRST_DIFFERENCE)
    with pytest.raises(ValueError):
        DidSpec(event_horizon=0)


def event_grid(effect_by_step, n_treated=3, n_control=5, n_pre=4, n_post=4, seed=0):
    rng = np.random.default_rng(seed)
    n = n_treated + n_control
    y = 20 + rng.normal(size=(n, 1)) + rng.normal(size=(1, n_pre + n_post))
    y[:n_treated, n_pre:] += np.asarray(effect_by_step, dtype=float)
    return grid_panel(y, treated=range(n_treated), merger_quarter=n_pre), y


def test_event_study_permanent_jump():
    data, _ = event_grid([0.7] * 4)
    rep = did_first_difference_event_study(data, DidSpec(differencing="first_difference", event_horizon=4))
    np.testing.assert_allclose(rep.coefficients, [0.7, 0, 0, 0], atol=1e-10)
    assert rep.names == ["beta_1", "beta_2", "beta_3", "beta_4"]


def test_event_study_linear_phase_in_matches_hand_design():
    c = 0.25
    data, y = event_grid([c * k for k in range(1, 5)], seed=4)
    rep = did_first_difference_event_study(data, DidSpec(differencing="first_difference", event_horizon=4))
    np.testing.assert_allclose(rep.coefficients, [c] * 4, atol=1e-10)
    # Hand-built design: differenced rows, quarter 2..7 dummies, intercept.
    dy = np.diff(y, axis=1).reshape(-1)
    q = np.tile(np.arange(1, 8), 8)
    trt = np.repeat(np.arange(8) < 3, 7)
    X = np.column_stack([(trt & (q == 4 + k - 1)) for k in range(1, 5)] + [np.ones(q.size)]
                        + [(q == s) for s in range(2, 8)]).astype(float)
    beta = np.linalg.lstsq(X, dy, rcond=None)[0]
    np.testing.assert_allclose(rep.coefficients, beta[:4], atol=1e-10)


def test_event_horizon_too_long():
    data, _ = event_grid([0.0] * 4)
    with pytest.raises(PanelError, match="exceeds the 4 observed"):
        did_first_difference_event_study(data, DidSpec(differencing="first_difference", event_horizon=5))


def test_single_observation_market_is_dropped_with_warning():
    data, _ = event_grid([0.0] * 4)
    keep = ~((data.frame["market"] == "m07") & (data.frame["quarter"] > 0))
    with pytest.warns(UserWarning, match="observed only once"):
        rep = did_first_difference_event_study(data.subset(keep), DidSpec(differencing="first_difference",
                                                                          event_horizon=2))
    assert rep.diagnostics["dropped_single_markets"] == 1


def test_first_difference_equals_fixed_effects_on_two_periods():
    rng = np.random.default_rng(9)
    data = grid_panel(rng.normal(size=(7, 2)) + 3, treated=[0, 2, 4], merger_quarter=1)
    fe = did_fixed_effects(data)["beta_did"]
    fd = did_first_difference_event_study(data, FD)["beta_1"]
    assert fd == pytest.approx(fe, abs=1e-12)


@pytest.mark.slow
def test_event_study_size_under_null():
    from scipy import stats

    rejections = 0
    for seed in range(100):
        rng = np.random.default_rng([8, seed])
        y = 20 + rng.normal(size=(200, 16))
        data = grid_panel(y, treated=range(50), merger_quarter=8)
        rep = did_first_difference_event_study(data, DidSpec(differencing="first_difference"))
        b, V, G, k = rep.coefficients, rep.vcov, rep.n_clusters, rep.coefficients.size
        # Cluster-robust Wald with the Hotelling-type small-sample scaling.
        stat = (b @ np.linalg.solve(V, b)) * (G - k) / (k * (G - 1))
        rejections += stats.f.sf(stat, k, G - k) < 0.05
    assert rejections <= 10


def test_percent_transform_values():
    assert percent_transform(-0.041) == pytest.approx(-4.02, abs=0.01)
    assert percent_transform(0.0) == 0.0
    assert percent_transform(0.216) == pytest.approx(24.11, abs=0.02)


@given(st.floats(-99.9, 1e4))
def test_percent_transform_inverts_log(x):
    assert percent_transform(math.log1p(x / 100)) == pytest.approx(x, rel=1e-12, abs=1e-12)


def test_event_weights_and_aggregation():
    np.testing.assert_allclose(event_weights(2), [2 / 3, 1 / 3])
    est, se = aggregate_event_effects([math.log(2), 0.0], np.zeros((2, 2)))
    assert est == pytest.approx(2 / 3) and se == 0.0
    V = np.diag([0.04, 0.01, 0.09])
    est, se = aggregate_event_effects(np.zeros(3), V)
    w = event_weights(3)
    assert est == 0.0 and se == pytest.approx(math.sqrt(w @ V @ w))


def test_aggregation_delta_method_matches_finite_differences():
    rng = np.random.default_rng(12)
    betas = rng.normal(0, 0.1, 8)
    A = rng.normal(size=(8, 8))
    V = A @ A.T / 100
    est, se = aggregate_event_effects(betas, V)
    h = 1e-6
    grad = np.array([(aggregate_event_effects(betas + h * e, V)[0] - aggregate_event_effects(betas - h * e, V)[0])
                     / (2 * h) for e in np.eye(8)])
    assert se == pytest.approx(math.sqrt(grad @ V @ grad), abs=1e-6)


def test_aggregation_rejects_bad_vcov():
    with pytest.raises(ValueError, match="positive semidefinite"):
        aggregate_event_effects([0.0, 0.0], np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="2x2"):
        aggregate_event_effects([0.0, 0.0], np.eye(3))


@settings(max_examples=30, deadline=None)
@given(
    shift=st.floats(-100, 100),
    seed=st.integers(0, 2**16),
)
def test_beta_invariant_to_additive_shifts(shift, seed):
    rng = np.random.default_rng(seed)
    y = 300 + rng.normal(size=(6, 5))
    data = grid_panel(y, treated=[0, 1], merger_quarter=2)
    base = did_fixed_effects(data)["beta_did"]
    market_shift = rng.normal(size=(6, 1)) * 10
    time_shift = rng.normal(size=(1, 5)) * 10
    shifted = grid_panel(y + shift + market_shift + time_shift, treated=[0, 1], merger_quarter=2)
    assert did_fixed_effects(shifted)["beta_did"] == pytest.approx(base, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(6))), st.integers(0, 1000))
def test_clustered_vcov_invariant_to_relabeling(perm, seed):
    rng = np.random.default_rng(seed)
    y = 20 + rng.normal(size=(6, 5))
    treated = [0, 1, 2]
    rep = did_fixed_effects(grid_panel(y, treated=treated, merger_quarter=2))
    relabeled = grid_panel(y[perm], treated=[perm.index(i) for i in treated], merger_quarter=2)
    rep2 = did_fixed_effects(relabeled)
    assert rep2["beta_did"] == pytest.approx(rep["beta_did"], abs=1e-12)
    np.testing.assert_allclose(rep2.vcov, rep.vcov, atol=1e-14, rtol=1e-9)


def test_report_serialises(sim_panel):
    import json

    rep = did_fixed_effects(sim_panel)
    d = json.loads(rep.to_json())
    assert set(d) >= {"coefficients", "se", "vcov", "diagnostics", "n_obs", "n_clusters", "cluster_level"}
    assert "beta_did" in rep.to_table("Fixed effects")

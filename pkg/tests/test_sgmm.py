import json

import numpy as np
import pytest

from mergerretro.errors import BootstrapError, IdentificationError
from mergerretro.estimator import (
    MomentSystem,
    StructuralSpec,
    build_demand_moments,
    build_supply_moments,
    estimate_structural,
    solve_linear_iv,
)
from mergerretro.panel import PanelDataset, TreatmentPlan
from mergerretro.sgmm import (
    BootstrapConfig,
    SgmmConfig,
    SyntheticWeighting,
    _run_bootstrap,
    _spread,
    bootstrap_inference,
    estimate_synthetic_gmm,
    sdid_treatment_effect,
    synthetic_moments,
    synthetic_weighting,
)
from mergerretro.simulator import DgpConfig, default_params, simulate_panel
from mergerretro.weights import WeightSet

from conftest import grid_panel


SPEC4 = StructuralSpec(horizon=4)


def weight_set(markets: dict, quarters: dict) -> WeightSet:
    return WeightSet(markets, quarters, (0.0, 0.0), 0.0, 0.0)


# ------------------------------------------------------------- weighting
def test_row_weights_follow_market_and_quarter(small_panel):
    est = estimate_synthetic_gmm(small_panel, SPEC4)
    ws = est.weights
    w = synthetic_weighting(small_panel, ws).values
    frame = small_panel.frame
    for i, row in enumerate(frame.itertuples()):
        omega = 1.0 if row.market in small_panel.plan.treated_markets else ws.market_weights[row.market]
        tau = 1.0 if row.quarter >= small_panel.plan.merger_quarter else ws.time_weights[row.quarter]
        assert w[i] == omega * tau
    treated_post = frame["market"].isin(small_panel.treated_markets) & (frame["quarter"] >= 4)
    assert np.all(w[treated_post.to_numpy()] == 1.0)


def test_pre_quarters_outside_window_get_zero_weight():
    data = simulate_panel(DgpConfig(n_treated=4, n_control=12, seed=2))
    narrow = PanelDataset(data.frame, TreatmentPlan(8, data.plan.treated_markets, pre_window=4, post_window=8))
    ws = estimate_synthetic_gmm(narrow).weights
    assert sorted(ws.time_weights) == [4, 5, 6, 7]
    w = synthetic_weighting(narrow, ws).values
    assert np.all(w[(narrow.frame["quarter"] < 4).to_numpy()] == 0.0)


def test_identity_weighting_leaves_system_unchanged(sim_panel):
    system = build_supply_moments(sim_panel)
    weighted = synthetic_moments(system, SyntheticWeighting.ones(sim_panel.n_obs))
    np.testing.assert_array_equal(weighted.obs_weights, system.obs_weights)
    np.testing.assert_array_equal(solve_linear_iv(weighted).coefficients, solve_linear_iv(system).coefficients)


def test_weighted_cross_moments_match_row_sum(sim_panel):
    rng = np.random.default_rng(0)
    system = build_demand_moments(sim_panel)
    values = rng.uniform(0, 2, sim_panel.n_obs)
    weighted = synthetic_moments(system, SyntheticWeighting(values))
    Z, X, w = weighted.instruments, weighted.regressors, weighted.obs_weights
    oracle_zx = np.zeros((Z.shape[1], X.shape[1]))
    oracle_zy = np.zeros(Z.shape[1])
    for i, r in enumerate(system.rows):
        oracle_zx += values[r] * np.outer(system.instruments[i], system.regressors[i])
        oracle_zy += values[r] * system.instruments[i] * system.outcome[i]
    np.testing.assert_allclose((Z * w[:, None]).T @ X, oracle_zx, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose((Z * w[:, None]).T @ weighted.outcome, oracle_zy, rtol=1e-12, atol=1e-12)
    beta = np.zeros(X.shape[1])
    assert weighted.moment_mean(beta) == pytest.approx(oracle_zy / system.n_obs, rel=1e-12)


def test_missing_weights_are_rejected(sim_panel):
    system = build_demand_moments(sim_panel)
    with pytest.raises(ValueError, match="weight missing"):
        synthetic_moments(system, SyntheticWeighting(np.ones(10)))
    values = np.ones(sim_panel.n_obs)
    values[system.rows[0]] = np.nan
    with pytest.raises(ValueError, match="weight missing"):
        synthetic_moments(system, SyntheticWeighting(values))
    bare = MomentSystem(system.instruments, system.regressors, system.outcome, system.cluster_ids)
    with pytest.raises(ValueError, match="weight missing"):
        synthetic_moments(bare, SyntheticWeighting(values))


def test_single_donor_matches_subsample(small_panel):
    controls = small_panel.control_markets
    donor = controls[3]
    quarters = {q: 0.25 for q in small_panel.plan.pre_quarters}
    ws = weight_set({m: float(m == donor) for m in controls}, quarters)
    values = synthetic_weighting(small_panel, ws).values
    keep = small_panel.frame["market"].isin(small_panel.treated_markets + [donor]).to_numpy()
    sub = small_panel.subset(keep)
    for builder in (build_demand_moments,):
        full = synthetic_moments(builder(small_panel), SyntheticWeighting(values))
        part = synthetic_moments(builder(sub), SyntheticWeighting(values[keep]))
        np.testing.assert_allclose(solve_linear_iv(full).coefficients, solve_linear_iv(part).coefficients,
                                   rtol=1e-10, atol=1e-12)
        kept = full.obs_weights > 0
        np.testing.assert_allclose(full.instruments[kept], part.instruments[part.obs_weights > 0])


# ------------------------------------------------------------- estimation
def test_uniform_weights_reproduce_structural(sim_panel):
    uniform = estimate_synthetic_gmm(sim_panel, cfg=SgmmConfig(weights="uniform"))
    assert uniform.to_json() == estimate_structural(sim_panel).to_json()
    ones = estimate_structural(sim_panel, row_weights=np.ones(sim_panel.n_obs))
    for key, value in estimate_structural(sim_panel).headline().items():
        assert ones.headline()[key] == pytest.approx(value, abs=1e-12)


def test_zero_weight_markets_can_be_deleted():
    data = simulate_panel(DgpConfig(n_treated=6, n_control=10, seed=4))
    est = estimate_synthetic_gmm(data, cfg=SgmmConfig(zeta=0.0))
    values = synthetic_weighting(data, est.weights).values
    dropped = [m for m, w in est.weights.market_weights.items() if w == 0.0]
    assert dropped
    keep = ~data.frame["market"].isin(dropped).to_numpy()
    again = estimate_structural(data.subset(keep), row_weights=values[keep])
    for key, value in est.headline().items():
        assert again.headline()[key] == pytest.approx(value, abs=1e-10)


def test_estimate_is_deterministic(small_panel):
    a = estimate_synthetic_gmm(small_panel, SPEC4)
    b = estimate_synthetic_gmm(small_panel, SPEC4)
    assert a.to_json() == b.to_json()
    assert a.weights.to_json() == b.weights.to_json()


def test_sgmm_config_validation():
    with pytest.raises(ValueError):
        SgmmConfig(weights="random")
    with pytest.raises(ValueError):
        SgmmConfig(zeta=-1.0)
    with pytest.raises(ValueError, match="B must be"):
        BootstrapConfig(B=1)


def test_calibrated_conduct_and_efficiency_within_bootstrap_se():
    params = default_params(delta_lambda=0.100, efficiency=(0.134 / 4.5,) * 8)
    data = simulate_panel(DgpConfig(params=params, n_treated=20, n_control=60, seed=31))
    est = estimate_synthetic_gmm(data)
    boot = bootstrap_inference(data, cfg=BootstrapConfig(B=200, seed=1))
    assert boot.n_failed == 0
    assert abs(est.delta_lambda - 0.100) < 3 * boot.se["delta_lambda"]
    assert abs(est.average_efficiency - 0.134) < 3 * boot.se["average_efficiency"]


# -------------------------------------------------------------- bootstrap
def test_bootstrap_is_bit_reproducible(small_panel):
    cfg = BootstrapConfig(B=2, seed=123)
    a = bootstrap_inference(small_panel, SPEC4, cfg=cfg)
    b = bootstrap_inference(small_panel, SPEC4, cfg=cfg)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    assert a.se == b.se
    c = bootstrap_inference(small_panel, SPEC4, cfg=BootstrapConfig(B=2, seed=124))
    assert c.se != a.se


def test_bootstrap_invariant_to_order_preserving_relabel(small_panel, tmp_path):
    frame = small_panel.frame.copy()
    frame["market"] = "x" + frame["market"]
    plan = TreatmentPlan(small_panel.plan.merger_quarter, frozenset("x" + m for m in small_panel.treated_markets),
                         pre_window=4, post_window=4)
    relabeled = PanelDataset(frame, plan)
    cfg = BootstrapConfig(B=5, seed=9)
    assert bootstrap_inference(relabeled, SPEC4, cfg=cfg).se == bootstrap_inference(small_panel, SPEC4, cfg=cfg).se
    result = bootstrap_inference(small_panel, SPEC4, cfg=cfg)
    path = tmp_path / "reps.csv"
    result.to_csv(path)
    assert path.read_text().splitlines()[0].startswith("replicate,")
    assert len(result.replicates) == 5


def test_failed_replicates_abort_past_limit(small_panel):
    calls = {"n": 0}

    def flaky(sample):
        calls["n"] += 1
        if calls["n"] % 5 == 0:
            raise IdentificationError("rank condition fails")
        return {"x": float(calls["n"])}

    with pytest.raises(BootstrapError, match="failed"):
        _run_bootstrap(small_panel, BootstrapConfig(B=20), flaky)

    calls["n"] = 0

    def rare(sample):
        calls["n"] += 1
        if calls["n"] == 3:
            raise IdentificationError("rank condition fails")
        return {"x": 1.0}

    result = _run_bootstrap(small_panel, BootstrapConfig(B=20), rare)
    assert result.n_failed == 1 and result.se == {"x": 0.0}


def test_spread_is_exact_for_constants():
    assert _spread(np.full(10, 0.1)) == 0.0
    assert _spread(np.array([1.0, 3.0])) == pytest.approx(np.sqrt(2))


def identical_markets_panel(effect, n_treated=3, n_control=5, n_quarters=8, merger_quarter=4, spread=1.0):
    rng = np.random.default_rng(12)
    base = 20 + rng.normal(size=n_quarters)
    offsets = spread * np.arange(n_treated + n_control, dtype=float)
    prices = base[None, :] + offsets[:, None]
    prices[:n_treated, merger_quarter:] += effect
    w = np.tile(rng.normal(size=n_quarters), (n_treated + n_control, 1))
    return grid_panel(prices, treated=range(n_treated), merger_quarter=merger_quarter, w=w)


def test_constant_estimator_has_zero_bootstrap_se():
    data = identical_markets_panel(0.7, spread=0.0)
    estimate, se = sdid_treatment_effect(data, boot=BootstrapConfig(B=20, seed=3))
    assert estimate == pytest.approx(0.7, abs=1e-10)
    assert se == 0.0


# -------------------------------------------------------------- synthetic DiD
@pytest.mark.parametrize("weights", ["solved", "uniform"])
def test_sdid_recovers_constructed_effect(weights):
    data = identical_markets_panel(-1.25)
    estimate, _ = sdid_treatment_effect(data, boot=BootstrapConfig(B=2), cfg=SgmmConfig(weights=weights))
    assert estimate == pytest.approx(-1.25, abs=1e-10)


def test_uniform_sdid_is_four_means_did():
    rng = np.random.default_rng(13)
    prices = 20 + rng.normal(size=(6, 8))
    data = grid_panel(prices, treated=[0, 1], merger_quarter=5)
    estimate, _ = sdid_treatment_effect(data, boot=BootstrapConfig(B=2), cfg=SgmmConfig(weights="uniform"))
    tr, co = prices[:2], prices[2:]
    oracle = (tr[:, 5:].mean() - tr[:, :5].mean()) - (co[:, 5:].mean() - co[:, :5].mean())
    assert estimate == pytest.approx(oracle, abs=1e-12)


def test_sdid_log_outcome(small_panel):
    level, _ = sdid_treatment_effect(small_panel, boot=BootstrapConfig(B=2))
    logged, _ = sdid_treatment_effect(small_panel, boot=BootstrapConfig(B=2), log_outcome=True)
    mean_price = small_panel.frame["price"].mean()
    assert np.sign(level) == np.sign(logged) or abs(level) < 0.05 * mean_price
    assert abs(logged) < 1


@pytest.mark.slow
def test_sdid_size_under_zero_effect():
    cfg = DgpConfig(n_treated=10, n_control=30, T_pre=4, T_post=4, params=default_params(delta_lambda=0.0, efficiency=0.0),
                    sigma_intercept_phi=0.0, sigma_intercept_vartheta=0.0)
    inside = 0
    for r in range(100):
        data = simulate_panel(cfg, np.random.default_rng([41, r]))
        estimate, se = sdid_treatment_effect(data, boot=BootstrapConfig(B=50, seed=r))
        inside += abs(estimate) < 3 * se
    assert inside >= 95

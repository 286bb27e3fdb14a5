import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mergerretro.errors import EquilibriumError
from mergerretro.simulator import (
    DgpConfig,
    default_params,
    run_monte_carlo,
    simulate_panel,
    truth,
    twin_params,
)

from conftest import noiseless_config


def equation_residuals(data, cfg):
    f = data.frame
    demand, supply = cfg.params.demand, cfg.params.supply
    Z, W = f[data.z_cols].to_numpy(), f[data.w_cols].to_numpy()
    d = f["quantity"] - (demand.alpha0 + f["alpha1_mt"] * f["price"] + Z @ np.asarray(demand.alpha2) + f["phi"])
    s = f["price"] - (supply.theta0 + f["gamma"] * f["quantity"] + W @ np.asarray(supply.theta2)
                      + f["cost_shift"] + f["vartheta"])
    return d.to_numpy(), s.to_numpy()


def test_symmetric_noiseless_markets_share_paths():
    cfg = noiseless_config(params=default_params(delta_lambda=0.0, efficiency=0.0), z_sd=0.0, w_sd=0.0,
                           n_treated=3, n_control=5)
    f = simulate_panel(cfg).frame
    paths = f.pivot(index="market", columns="quarter", values="price").to_numpy()
    np.testing.assert_array_equal(paths, np.tile(paths[0], (8, 1)))
    qty = f.pivot(index="market", columns="quarter", values="quantity").to_numpy()
    np.testing.assert_array_equal(qty, np.tile(qty[0], (8, 1)))


def test_efficiency_step_lowers_price_by_passthrough():
    # gamma_post * alpha1 = (0.1 + 0.3/3) * -3 = -0.6, so pass-through is 1/1.6.
    stepped = noiseless_config(params=default_params(alpha1=-3.0, delta_lambda=0.1, efficiency=-0.16), seed=1)
    flat = noiseless_config(params=default_params(alpha1=-3.0, delta_lambda=0.1, efficiency=0.0), seed=1)
    assert stepped.slopes(-3.0)[2] * -3.0 == pytest.approx(-0.6)
    a, b = simulate_panel(stepped).frame, simulate_panel(flat).frame
    treated_post = (a["treated"] == 1) & (a["quarter"] >= 8)
    np.testing.assert_allclose((a["price"] - b["price"])[treated_post], -0.10, atol=1e-12)
    np.testing.assert_array_equal(a["price"][~treated_post], b["price"][~treated_post])
    assert truth(stepped)["price_effect"] == pytest.approx(-0.10, abs=1e-15)


def test_equilibrium_residuals_vanish(sim_panel):
    cfg = DgpConfig(seed=3)
    demand_res, supply_res = equation_residuals(sim_panel, cfg)
    assert np.max(np.abs(demand_res)) <= 1e-10
    assert np.max(np.abs(supply_res)) <= 1e-10


def test_cumulative_quarterly_efficiency():
    effs = (-0.01, -0.02, 0.0, 0.03, 0.0, 0.0, 0.0, 0.01)
    cfg = noiseless_config(params=default_params(efficiency=effs), n_treated=1, n_control=1)
    f = simulate_panel(cfg).frame
    shift = f.loc[f["treated"] == 1, "cost_shift"].to_numpy()
    np.testing.assert_allclose(shift, np.concatenate([np.zeros(8), np.cumsum(effs)]), atol=1e-15)
    assert truth(cfg)["average_efficiency"] == pytest.approx(sum(e * (8 - k) / 8 for k, e in enumerate(effs)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-0.15, 0.15))
def test_twins_generate_identical_panels(seed, kappa):
    cfg = DgpConfig(n_treated=4, n_control=6, seed=seed % 1000)
    twin = DgpConfig(n_treated=4, n_control=6, seed=seed % 1000, params=twin_params(cfg.params, kappa))
    a, b = simulate_panel(cfg).frame, simulate_panel(twin).frame
    np.testing.assert_allclose(a["price"], b["price"], atol=1e-12)
    np.testing.assert_allclose(a["quantity"], b["quantity"], atol=1e-12)
    assert abs(truth(cfg)["delta_lambda"] - truth(twin)["delta_lambda"]) <= 1e-12


def test_zero_effects_make_groups_exchangeable():
    cfg = DgpConfig(n_treated=100, n_control=100, params=default_params(delta_lambda=0.0, efficiency=0.0))
    rejections = 0
    for seed in range(20):
        f = simulate_panel(cfg, np.random.default_rng([0, seed])).frame
        last = f[f["quarter"] == 15]
        p = stats.ks_2samp(last.loc[last["treated"] == 1, "price"], last.loc[last["treated"] == 0, "price"]).pvalue
        rejections += p < 0.01
    assert rejections <= 2


def test_config_validation():
    with pytest.raises(ValueError, match="rho"):
        DgpConfig(rho=1.0)
    with pytest.raises(ValueError, match="sigma_phi"):
        DgpConfig(sigma_phi=-1.0)
    base = default_params()
    bad = replace(base, supply=replace(base.supply, theta1=-1.0))
    with pytest.raises(EquilibriumError, match="1 - gamma\\*alpha1"):
        DgpConfig(params=bad)
    with pytest.raises(ValueError, match="unknown DGP keys"):
        DgpConfig.from_dict({"n_markets": 3})


def test_config_round_trip():
    cfg = DgpConfig(n_treated=3, selection="demand", selection_delta=0.2, params=default_params(delta_lambda=0.05))
    again = DgpConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_metadata_records_truth(sim_panel):
    meta = sim_panel.metadata
    assert meta["truth"]["delta_lambda"] == pytest.approx(0.107)
    assert meta["dgp"]["seed"] == 3
    assert len(sim_panel.treated_markets) == 20 and len(sim_panel.control_markets) == 60


def test_divergent_controls_get_extra_trend():
    cfg = noiseless_config(n_treated=2, n_control=10, divergent_fraction=0.5, divergent_trend=0.2)
    data = simulate_panel(cfg)
    divergent = data.metadata["divergent_markets"]
    assert len(divergent) == 5 and all(m.startswith("C") for m in divergent)
    f = data.frame
    slope = f.groupby("market").apply(lambda g: np.polyfit(g["quarter"], g["vartheta"], 1)[0], include_groups=False)
    np.testing.assert_allclose(slope[divergent], 0.2, atol=1e-10)
    np.testing.assert_allclose(slope.drop(divergent), 0.0, atol=1e-10)


# ------------------------------------------------------------- Monte Carlo
def test_monte_carlo_is_deterministic():
    cfg = DgpConfig(n_treated=5, n_control=15, seed=4)
    a = run_monte_carlo(cfg, ["fe_did", "structural"], 2)
    b = run_monte_carlo(cfg, ["fe_did", "structural"], 2)
    assert a.to_json() == b.to_json()
    assert a.estimates.to_csv() == b.estimates.to_csv()
    c = run_monte_carlo(cfg, ["fe_did", "structural"], 2, n_jobs=2)
    assert c.to_json() == a.to_json()
    assert a.n_replications == 2 and set(a.estimates["replication"]) == {0, 1}


def test_monte_carlo_records_failures():
    cfg = DgpConfig(n_treated=5, n_control=15, seed=4)
    res = run_monte_carlo(cfg, ["fe_did", {"name": "structural", "label": "long", "options": {"spec": {"horizon": 12}}}], 3)
    assert len(res.failures) == 3 and set(res.failures["estimator"]) == {"long"}
    assert res.row("fe_did", "price_effect")["n"] == 3
    with pytest.raises(ValueError, match="R must be"):
        run_monte_carlo(cfg, ["fe_did"], 1)
    with pytest.raises(ValueError, match="unknown estimator"):
        run_monte_carlo(cfg, ["ols"], 2)


def test_summary_statistics_match_estimates():
    cfg = DgpConfig(n_treated=5, n_control=15, seed=8)
    res = run_monte_carlo(cfg, ["structural"], 5)
    sub = res.estimates[res.estimates["parameter"] == "delta_lambda"]
    row = res.row("structural", "delta_lambda")
    b = sub["estimate"].to_numpy()
    assert row["bias"] == pytest.approx(b.mean() - 0.107)
    assert row["rmse"] == pytest.approx(np.sqrt(np.mean((b - 0.107) ** 2)))
    assert row["sd"] == pytest.approx(b.std(ddof=1))
    assert row["se_sd_ratio"] == pytest.approx(sub["se"].mean() / b.std(ddof=1))
    covered = np.abs(b - 0.107) <= stats.norm.ppf(0.975) * sub["se"].to_numpy()
    assert row["coverage"] == pytest.approx(covered.mean())


@pytest.mark.slow
def test_demand_selection_biases_did_but_not_efficiency():
    cfg = DgpConfig(params=default_params(delta_lambda=0.0, efficiency=(-0.02,) * 8),
                    selection="demand", selection_delta=0.1, seed=13)
    R = 100
    res = run_monte_carlo(cfg, ["fe_did", "structural"], R)
    did = res.row("fe_did", "price_effect")
    eff = res.row("structural", "average_efficiency")
    assert abs(did["bias"]) > 3 * did["sd"] / np.sqrt(R)
    assert abs(eff["bias"]) < 3 * eff["sd"] / np.sqrt(R)


@pytest.mark.slow
def test_structural_se_to_sd_ratio():
    res = run_monte_carlo(DgpConfig(n_treated=50, n_control=200, seed=12), ["structural"], 100)
    for param in ("alpha1", "delta_lambda", "average_efficiency", "price_effect"):
        assert 0.8 <= res.row("structural", param)["se_sd_ratio"] <= 1.2

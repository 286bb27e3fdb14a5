"""Equilibrium panel simulator and Monte Carlo harness.

Each market-quarter draws demand and cost shifters and structural shocks,
evaluates the regime-specific nuisance slope, and solves the linear system for
the equilibrium price and quantity.  All random draws are made before any
parameter enters, so two configurations that differ only in parameters share
every draw given the seed.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .did import (
    DidSpec,
    Differencing,
    aggregate_event_effects,
    did_first_difference_event_study,
    did_fixed_effects,
)
from .errors import EquilibriumError
from .estimator import StructuralSpec, estimate_structural
from .panel import PanelDataset, TreatmentPlan
from .report import to_jsonable
from .structural import (
    ConductParams,
    DemandParams,
    ModelParams,
    Shocks,
    SupplyParams,
    equilibrium,
    passthrough_price_effect,
)

__all__ = [
    "DgpConfig",
    "McResult",
    "SelectionMode",
    "default_params",
    "estimator_registry",
    "run_monte_carlo",
    "simulate_panel",
    "truth",
    "twin_params",
]


class SelectionMode(str, enum.Enum):
    NONE = "none"
    DEMAND = "demand"
    SUPPLY = "supply"


def default_params(
    delta_lambda: float = 0.107,
    alpha1: float = -3.112,
    efficiency: float | Sequence[float] = (-0.01,) * 8,
) -> ModelParams:
    """Default truth: demand slope and conduct change of the AA-US calibration."""
    lam_pre = 0.2
    return ModelParams(
        DemandParams(alpha0=20.0, alpha1=alpha1, alpha2=(1.0, 0.5)),
        SupplyParams(theta0=1.0, theta1=0.1, theta2=(0.5, 0.3), theta3=efficiency),
        ConductParams(lambda_ctrl=lam_pre, lambda_pre=lam_pre, lambda_post=lam_pre + delta_lambda),
    )


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process for simulated merger panels.

    Shocks follow ``market intercept + market trend * t + AR(1) innovation``
    separately for demand (``phi``) and cost (``vartheta``).  Shifters are
    ``mean + drift * t + sd * N(0, 1)`` per component.  Treated markets come
    first on the quarter axis ``0 .. T_pre + T_post - 1`` with the merger at
    quarter ``T_pre``.

    Selection shifts the treated markets' shock trend (demand or cost) by
    ``selection_delta``.  ``divergent_fraction`` of the control markets get
    an extra cost-shock trend ``divergent_trend`` and demand-shock trend
    ``divergent_demand_trend``.  ``regime2_fraction`` of all markets face the
    demand slope ``params.demand_slope_regime2``.
    """

    n_treated: int = 20
    n_control: int = 60
    T_pre: int = 8
    T_post: int = 8
    params: ModelParams = field(default_factory=default_params)
    sigma_phi: float = 0.5
    sigma_vartheta: float = 0.1
    rho: float = 0.0
    sigma_kappa_phi: float = 0.0
    sigma_kappa_vartheta: float = 0.0
    sigma_intercept_phi: float = 0.5
    sigma_intercept_vartheta: float = 0.1
    common_time_sd: float = 0.0
    selection: SelectionMode = SelectionMode.NONE
    selection_delta: float = 0.0
    divergent_fraction: float = 0.0
    divergent_trend: float = 0.0
    divergent_demand_trend: float = 0.0
    z_mean: float = 1.0
    z_sd: float = 1.0
    z_drift: float = 0.0
    w_mean: float = 1.0
    w_sd: float = 1.0
    w_drift: float = 0.0
    regime2_fraction: float = 0.0
    load_factor: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "selection", SelectionMode(self.selection))
        if self.n_treated < 0 or self.n_control < 0 or self.n_treated + self.n_control < 1:
            raise ValueError("need at least one market")
        if self.T_pre < 1 or self.T_post < 1:
            raise ValueError("T_pre and T_post must be >= 1")
        for name in ("sigma_phi", "sigma_vartheta", "sigma_kappa_phi", "sigma_kappa_vartheta",
                     "sigma_intercept_phi", "sigma_intercept_vartheta", "z_sd", "w_sd", "common_time_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if not 0 <= self.divergent_fraction <= 1 or not 0 <= self.regime2_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.regime2_fraction > 0 and self.params.demand_slope_regime2 is None:
            raise ValueError("regime2_fraction > 0 requires params.demand_slope_regime2")
        for a1 in self.demand_slopes:
            for g in self.slopes(a1):
                if not 1.0 - g * a1 > 0:
                    raise EquilibriumError(
                        f"invalid regime: 1 - gamma*alpha1 = {1.0 - g * a1:.4g} must be positive"
                    )

    @property
    def demand_slopes(self) -> list[float]:
        out = [self.params.demand.alpha1]
        if self.regime2_fraction > 0:
            out.append(self.params.demand_slope_regime2)
        return out

    def slopes(self, alpha1: float) -> tuple[float, float, float]:
        s = self.params.slopes(alpha1)
        return s.gamma_ctrl, s.gamma_pre, s.gamma_post

    @property
    def n_markets(self) -> int:
        return self.n_treated + self.n_control

    @property
    def n_quarters(self) -> int:
        return self.T_pre + self.T_post

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "params"}
        d["selection"] = self.selection.value
        d["params"] = self.params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DgpConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown DGP keys: {sorted(unknown)}")
        if "params" in d and not isinstance(d["params"], ModelParams):
            base = default_params().to_dict()
            base.update(d["params"])
            d["params"] = ModelParams.from_dict(base)
        return cls(**d)


def twin_params(params: ModelParams, kappa: float) -> ModelParams:
    """Observationally equivalent parameters: all conduct levels shifted by ``kappa``."""
    a1 = params.demand.alpha1
    c = params.conduct
    return replace(
        params,
        supply=replace(params.supply, theta1=params.supply.theta1 + kappa / a1),
        conduct=ConductParams(c.lambda_ctrl + kappa, c.lambda_pre + kappa, c.lambda_post + kappa),
    )


def _draw(cfg: DgpConfig, rng: np.random.Generator) -> dict:
    """All stochastic components, independent of the structural parameters."""
    M, T = cfg.n_markets, cfg.n_quarters
    p = len(cfg.params.demand.alpha2)
    q = len(cfg.params.supply.theta2)
    t = np.arange(T, dtype=float)
    treated = np.arange(M) < cfg.n_treated

    Z = cfg.z_mean + cfg.z_drift * t[None, :, None] + cfg.z_sd * rng.standard_normal((M, T, p))
    W = cfg.w_mean + cfg.w_drift * t[None, :, None] + cfg.w_sd * rng.standard_normal((M, T, q))

    def shock(sigma_int, sigma_kappa, sigma_innov):
        intercept = sigma_int * rng.standard_normal(M)
        kappa = sigma_kappa * rng.standard_normal(M)
        innov = rng.standard_normal((M, T))
        e = np.empty((M, T))
        e[:, 0] = sigma_innov * innov[:, 0] / math.sqrt(1.0 - cfg.rho ** 2)
        for s in range(1, T):
            e[:, s] = cfg.rho * e[:, s - 1] + sigma_innov * innov[:, s]
        return intercept, kappa, e

    a_phi, k_phi, e_phi = shock(cfg.sigma_intercept_phi, cfg.sigma_kappa_phi, cfg.sigma_phi)
    a_th, k_th, e_th = shock(cfg.sigma_intercept_vartheta, cfg.sigma_kappa_vartheta, cfg.sigma_vartheta)
    common = cfg.common_time_sd * rng.standard_normal(T)
    divergent_u = rng.random(M)
    regime_u = rng.random(M)

    if cfg.selection is SelectionMode.DEMAND:
        k_phi = k_phi + cfg.selection_delta * treated
    elif cfg.selection is SelectionMode.SUPPLY:
        k_th = k_th + cfg.selection_delta * treated
    n_div = int(round(cfg.divergent_fraction * cfg.n_control))
    divergent = np.zeros(M, dtype=bool)
    if n_div:
        controls = np.flatnonzero(~treated)
        divergent[controls[np.argsort(divergent_u[controls], kind="stable")[:n_div]]] = True
    k_th = k_th + cfg.divergent_trend * divergent
    k_phi = k_phi + cfg.divergent_demand_trend * divergent

    phi = a_phi[:, None] + k_phi[:, None] * t + e_phi + common[None, :]
    vartheta = a_th[:, None] + k_th[:, None] * t + e_th
    regime2 = regime_u < cfg.regime2_fraction
    return dict(Z=Z, W=W, phi=phi, vartheta=vartheta, treated=treated, divergent=divergent, regime2=regime2)


def _market_ids(cfg: DgpConfig) -> list[str]:
    width = max(3, len(str(cfg.n_markets)))
    return [f"T{i:0{width}d}" for i in range(cfg.n_treated)] + [f"C{i:0{width}d}" for i in range(cfg.n_control)]


def simulate_panel(cfg: DgpConfig, rng: np.random.Generator | None = None) -> PanelDataset:
    """Draw one equilibrium panel.

    Parameters
    ----------
    cfg : DgpConfig
    rng : numpy Generator, optional
        Defaults to ``np.random.default_rng(cfg.seed)``.

    Returns
    -------
    PanelDataset
        Canonical columns plus ``phi``/``vartheta`` (the realised shocks),
        ``regime`` (1 or 2) and truth in ``metadata["truth"]``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    d = _draw(cfg, rng)
    M, T = cfg.n_markets, cfg.n_quarters
    mq = cfg.T_pre
    params = cfg.params
    t = np.arange(T)
    treated = d["treated"]
    post = t[None, :] >= mq

    a1_1 = params.demand.alpha1
    a1 = np.where(d["regime2"], params.demand_slope_regime2 if params.demand_slope_regime2 is not None else a1_1, a1_1)
    a1_mt = np.broadcast_to(a1[:, None], (M, T))
    th1 = params.supply.theta1
    c = params.conduct
    lam = np.where(treated[:, None], np.where(post, c.lambda_post, c.lambda_pre), c.lambda_ctrl)
    gamma = th1 - lam / a1_mt
    steps = np.where(treated[:, None] & post, t[None, :] - mq + 1, 0)
    cost_shift = params.supply.efficiency_path(steps)

    P, Q = equilibrium(params.demand, params.supply, gamma, d["Z"], d["W"], cost_shift,
                       Shocks(d["phi"], d["vartheta"]), alpha1=a1_mt)
    ids = _market_ids(cfg)
    frame = pd.DataFrame({
        "market": np.repeat(ids, T),
        "quarter": np.tile(t, M),
        "price": P.reshape(-1),
        "quantity": Q.reshape(-1),
        "seats": Q.reshape(-1) / cfg.load_factor,
    })
    for j in range(d["Z"].shape[2]):
        frame[f"z_{j + 1}"] = d["Z"][:, :, j].reshape(-1)
    for j in range(d["W"].shape[2]):
        frame[f"w_{j + 1}"] = d["W"][:, :, j].reshape(-1)
    frame["regime"] = np.repeat(np.where(d["regime2"], 2, 1), T)
    frame["treated"] = np.repeat(treated.astype(int), T)
    frame["phi"] = d["phi"].reshape(-1)
    frame["vartheta"] = d["vartheta"].reshape(-1)
    frame["gamma"] = gamma.reshape(-1)
    frame["cost_shift"] = cost_shift.reshape(-1)
    frame["alpha1_mt"] = a1_mt.reshape(-1)

    plan = TreatmentPlan(mq, frozenset(np.array(ids)[treated]), cfg.T_pre, cfg.T_post)
    meta = {"truth": truth(cfg), "dgp": cfg.to_dict(),
            "divergent_markets": sorted(np.array(ids)[d["divergent"]].tolist())}
    return PanelDataset(frame, plan, meta, z_cols=[f"z_{j + 1}" for j in range(d["Z"].shape[2])],
                        w_cols=[f"w_{j + 1}" for j in range(d["W"].shape[2])], x_cols=[])


def truth(cfg: DgpConfig) -> dict:
    """Ground-truth estimands implied by the configuration (demand regime 1)."""
    params = cfg.params
    a1 = params.demand.alpha1
    g_ctrl, g_pre, g_post = cfg.slopes(a1)
    theta3 = params.supply.theta3
    if params.supply.quarterly:
        T = len(theta3)
        avg = float(sum(th * (T - k) / T for k, th in enumerate(theta3)))
    else:
        avg = float(theta3)
    return to_jsonable({
        "params": params.to_dict(),
        "gamma_ctrl": g_ctrl,
        "gamma_pre": g_pre,
        "gamma_post": g_post,
        "delta_lambda": params.conduct.lambda_post - params.conduct.lambda_pre,
        "alpha1": a1,
        "average_efficiency": avg,
        "price_effect": passthrough_price_effect(avg, g_post, a1),
        "merger_quarter": cfg.T_pre,
    })


# ---------------------------------------------------------------- Monte Carlo
def _fe_did(data: PanelDataset, options: Mapping[str, Any]) -> dict:
    rep = did_fixed_effects(data, DidSpec(outcome=options.get("outcome", "price"),
                                          log_outcome=options.get("log_outcome", False)))
    return {"price_effect": (rep["beta_did"], rep.se_of("beta_did"))}


def _fd_event_study(data: PanelDataset, options: Mapping[str, Any]) -> dict:
    spec = DidSpec(outcome=options.get("outcome", "price"), log_outcome=options.get("log_outcome", False),
                   differencing=Differencing.FIRST_DIFFERENCE, event_horizon=options.get("horizon", data.plan.post_window))
    rep = did_first_difference_event_study(data, spec)
    betas = rep.coefficients[: spec.event_horizon]
    w = np.arange(spec.event_horizon, 0, -1) / spec.event_horizon
    est = float(w @ betas)
    se = float(np.sqrt(w @ rep.vcov[: spec.event_horizon, : spec.event_horizon] @ w))
    out = {"price_effect": (est, se)}
    if options.get("log_outcome", False):
        out["percent_effect"] = aggregate_event_effects(betas, rep.vcov[: spec.event_horizon, : spec.event_horizon])
    return out


def _structural_result(est) -> dict:
    return {
        "alpha1": (est.alpha1, est.alpha1_se),
        "delta_lambda": (est.delta_lambda, est.delta_lambda_se),
        "average_efficiency": (est.average_efficiency, est.average_efficiency_se),
        "price_effect": (est.price_effect, est.price_effect_se),
    }


def _structural(data: PanelDataset, options: Mapping[str, Any]) -> dict:
    spec = StructuralSpec(**options.get("spec", {}))
    return _structural_result(estimate_structural(data, spec))


def _sgmm(data: PanelDataset, options: Mapping[str, Any]) -> dict:
    from .sgmm import SgmmConfig, BootstrapConfig, bootstrap_inference, estimate_synthetic_gmm

    spec = StructuralSpec(**options.get("spec", {}))
    cfg = SgmmConfig(**options.get("sgmm", {}))
    est = estimate_synthetic_gmm(data, spec, cfg)
    out = _structural_result(est)
    if options.get("bootstrap"):
        boot = bootstrap_inference(data, spec, BootstrapConfig(**options["bootstrap"]), cfg)
        for k in out:
            out[k] = (out[k][0], boot.se[k])
    return out


def _sdid(data: PanelDataset, options: Mapping[str, Any]) -> dict:
    from .sgmm import BootstrapConfig, sdid_treatment_effect

    boot = options.get("bootstrap", {"B": 50})
    est, se = sdid_treatment_effect(data, options.get("outcome", "price"), BootstrapConfig(**boot))
    return {"price_effect": (est, se)}


def estimator_registry() -> dict[str, Callable[[PanelDataset, Mapping[str, Any]], dict]]:
    """Named estimators usable in Monte Carlo experiments.

    Each callable maps ``(panel, options)`` to ``{parameter: (estimate, se)}``.
    """
    return {
        "fe_did": _fe_did,
        "fd_event_study": _fd_event_study,
        "structural": _structural,
        "sgmm": _sgmm,
        "sdid": _sdid,
    }


@dataclass
class McResult:
    """Per-replication estimates plus bias / RMSE / coverage summaries."""

    estimates: pd.DataFrame
    summary: pd.DataFrame
    truth: dict
    n_replications: int
    failures: pd.DataFrame

    def to_dict(self) -> dict:
        return to_jsonable({
            "n_replications": self.n_replications,
            "truth": self.truth,
            "summary": self.summary.to_dict(orient="records"),
            "failures": self.failures.to_dict(orient="records"),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def row(self, estimator: str, parameter: str) -> pd.Series:
        s = self.summary
        hit = s[(s["estimator"] == estimator) & (s["parameter"] == parameter)]
        if hit.empty:
            raise KeyError((estimator, parameter))
        return hit.iloc[0]


def _summarise(est: pd.DataFrame, truth_values: Mapping[str, float], level: float = 0.95) -> pd.DataFrame:
    from scipy import stats

    zcrit = stats.norm.ppf(0.5 + level / 2)
    rows = []
    for (name, param), g in est.groupby(["estimator", "parameter"], sort=True):
        g = g.dropna(subset=["estimate"])
        true = truth_values.get(param, np.nan)
        b = g["estimate"].to_numpy(float)
        s = g["se"].to_numpy(float)
        sd = float(np.std(b, ddof=1)) if b.size > 1 else np.nan
        mean_se = float(np.mean(s)) if s.size else np.nan
        rows.append({
            "estimator": name,
            "parameter": param,
            "n": int(b.size),
            "truth": true,
            "mean": float(np.mean(b)) if b.size else np.nan,
            "bias": float(np.mean(b) - true) if b.size else np.nan,
            "rmse": float(np.sqrt(np.mean((b - true) ** 2))) if b.size else np.nan,
            "sd": sd,
            "mean_se": mean_se,
            "se_sd_ratio": mean_se / sd if sd and sd > 0 else np.nan,
            "coverage": float(np.mean(np.abs(b - true) <= zcrit * s)) if b.size else np.nan,
        })
    return pd.DataFrame(rows)


def _replicate(job) -> tuple[list, list]:
    cfg, specs, r = job
    registry = estimator_registry()
    data = simulate_panel(cfg, np.random.default_rng([cfg.seed, r]))
    records, failures = [], []
    for label, name, options in specs:
        try:
            res = registry[name](data, options)
        except Exception as exc:  # noqa: BLE001 - recorded, by contract
            failures.append({"replication": r, "estimator": label, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for param, (b, s) in res.items():
            records.append({"replication": r, "estimator": label, "parameter": param,
                            "estimate": float(b), "se": float(s)})
    return records, failures


def run_monte_carlo(
    cfg: DgpConfig,
    estimators: Sequence[Mapping[str, Any]] | Sequence[str],
    R: int,
    *,
    truth_values: Mapping[str, float] | None = None,
    n_jobs: int = 1,
) -> McResult:
    """Run ``R`` seeded replications of every estimator.

    Parameters
    ----------
    cfg : DgpConfig
        Replication ``r`` simulates with ``np.random.default_rng([cfg.seed, r])``.
    estimators : sequence
        Registry names, or mappings ``{"name": ..., "label": ..., "options": {...}}``.
    R : int
        Number of replications (>= 2).
    truth_values : mapping, optional
        Override the truth used for bias and coverage (defaults to the DGP truth).
    n_jobs : int
        Worker processes; results do not depend on it.

    Notes
    -----
    An estimator exception is recorded in ``failures`` and leaves NaN for
    that replication; it does not stop the experiment.
    """
    if R < 2:
        raise ValueError("R must be >= 2")
    registry = estimator_registry()
    specs = []
    for e in estimators:
        e = {"name": e} if isinstance(e, str) else dict(e)
        if e["name"] not in registry:
            raise ValueError(f"unknown estimator {e['name']!r}; choose from {sorted(registry)}")
        specs.append((e.get("label", e["name"]), e["name"], e.get("options", {})))
    base_truth = truth(cfg)
    tv = {k: base_truth[k] for k in ("alpha1", "delta_lambda", "average_efficiency", "price_effect")}
    tv.update(truth_values or {})

    jobs = [(cfg, specs, r) for r in range(R)]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_replicate, jobs))
    else:
        outcomes = [_replicate(job) for job in jobs]
    records = [rec for recs, _ in outcomes for rec in recs]
    failures = [f for _, fails in outcomes for f in fails]
    est = pd.DataFrame(records, columns=["replication", "estimator", "parameter", "estimate", "se"])
    fail = pd.DataFrame(failures, columns=["replication", "estimator", "error"])
    return McResult(est, _summarise(est, tv), tv, R, fail)

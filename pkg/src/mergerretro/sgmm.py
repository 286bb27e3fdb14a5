"""Synthetic GMM: structural moments reweighted by synthetic-DiD weights, with block bootstrap.

Observation weights are ``w_mt = omega_m * tau_t`` where ``omega_m`` is the
market weight for control markets (1 for treated markets) and ``tau_t`` the
time weight for pre-merger quarters (1 for post-merger quarters).  Pre-merger
quarters before the configured pre-window carry weight 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import BootstrapError, MergerRetroError
from .estimator import (
    MomentSystem,
    StructuralEstimate,
    StructuralSpec,
    estimate_structural,
    estimate_structural_point,
)
from .panel import PanelArrays, PanelDataset
from .report import to_jsonable
from .weights import WeightSet, residualize_arrays, solve_weights

__all__ = [
    "BootstrapConfig",
    "BootstrapResult",
    "SgmmConfig",
    "SyntheticWeighting",
    "bootstrap_inference",
    "estimate_synthetic_gmm",
    "sdid_treatment_effect",
    "synthetic_moments",
    "synthetic_weighting",
]

MAX_FAILED_SHARE = 0.10


@dataclass(frozen=True)
class SgmmConfig:
    """Weighting options.

    ``weights="uniform"`` sets every observation weight to 1, which reduces
    the estimator to :func:`estimate_structural`.
    """

    weights: str = "solved"
    zeta: float | str = "auto"
    residualize: str = "covariates"
    outcome: str = "price"

    def __post_init__(self) -> None:
        if self.weights not in ("solved", "uniform"):
            raise ValueError("weights must be 'solved' or 'uniform'")
        if self.residualize not in ("covariates", "raw"):
            raise ValueError("residualize must be 'covariates' or 'raw'")
        if self.zeta != "auto" and not float(self.zeta) >= 0:
            raise ValueError("zeta must be 'auto' or a non-negative number")


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 200
    seed: int = 0
    resample: str = "stratified"

    def __post_init__(self) -> None:
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if self.resample != "stratified":
            raise ValueError("only stratified resampling is supported")


@dataclass
class SyntheticWeighting:
    """Per-panel-row observation weights."""

    values: np.ndarray

    @classmethod
    def ones(cls, n: int) -> "SyntheticWeighting":
        return cls(np.ones(n))


def _row_weights(arr: PanelArrays, ws: WeightSet, pre_quarters: list) -> np.ndarray:
    omega = np.ones(arr.n_markets)
    ctrl = np.flatnonzero(~arr.treated_market)
    omega[ctrl] = [ws.market_weights[arr.market_ids[i]] for i in ctrl]
    q0 = int(pre_quarters[0])
    tau_by_offset = np.array([ws.time_weights[int(q)] for q in pre_quarters])
    post = arr.quarter >= arr.merger_quarter
    offset = arr.quarter - q0
    in_block = (offset >= 0) & (offset < len(pre_quarters)) & ~post
    r = np.where(post, 1.0, 0.0)
    r[in_block] = tau_by_offset[offset[in_block]]
    return omega[arr.market] * r


def synthetic_weighting(data: PanelDataset, ws: WeightSet) -> SyntheticWeighting:
    """Observation weights ``omega_m * tau_t`` aligned with ``data.frame`` rows."""
    return SyntheticWeighting(_row_weights(data.arrays, ws, list(data.plan.pre_quarters)))


def synthetic_moments(system: MomentSystem, weighting: SyntheticWeighting) -> MomentSystem:
    """Multiply the system's observation weights by the synthetic weights of its rows.

    Raises
    ------
    ValueError
        If a moment row has no weight (no row map, out of range, or NaN).
    """
    if system.rows is None:
        raise ValueError("moment system carries no row map; weight missing for its observations")
    values = np.asarray(weighting.values, dtype=float)
    if system.rows.size and (system.rows.max() >= values.size or system.rows.min() < 0):
        raise ValueError("weight missing for an observation (row outside the weighting)")
    w = values[system.rows]
    if np.any(np.isnan(w)):
        raise ValueError("weight missing for an observation")
    return system.with_weights(w)


def _solve(arr: PanelArrays, y: np.ndarray, pre_q: list, post_q: list, cfg: SgmmConfig) -> WeightSet:
    block = residualize_arrays(arr, y, pre_q, post_q, cfg.residualize)
    return solve_weights(block, cfg.zeta)


def _outcome(arr: PanelArrays, name: str) -> np.ndarray:
    if name == "price":
        return arr.price
    if name == "quantity":
        return arr.quantity
    raise ValueError(f"synthetic weights can be built on 'price' or 'quantity', not {name!r}")


def estimate_synthetic_gmm(
    data: PanelDataset,
    spec: StructuralSpec = StructuralSpec(),
    cfg: SgmmConfig = SgmmConfig(),
) -> StructuralEstimate:
    """Residualise, solve weights, then estimate the structural model by weighted 2SLS.

    The returned estimate carries the :class:`WeightSet` in ``weights``
    (``None`` for uniform weighting).
    """
    if cfg.weights == "uniform":
        return estimate_structural(data, spec)
    arr = data.arrays
    pre_q, post_q = list(data.plan.pre_quarters), list(data.plan.post_quarters)
    ws = _solve(arr, _outcome(arr, cfg.outcome), pre_q, post_q, cfg)
    est = estimate_structural(arr, spec, row_weights=_row_weights(arr, ws, pre_q))
    est.weights = ws
    return est


@dataclass
class BootstrapResult:
    """Bootstrap standard errors and per-replicate estimates."""

    se: dict
    replicates: pd.DataFrame
    n_failed: int
    B: int
    seed: int

    def to_dict(self) -> dict:
        return to_jsonable({"se": self.se, "n_failed": self.n_failed, "B": self.B, "seed": self.seed})

    def to_csv(self, path: str | Path) -> None:
        self.replicates.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _resample_codes(arr: PanelArrays, rng: np.random.Generator) -> np.ndarray:
    # Codes follow the lexicographic order of market ids, so draws do not depend on row order.
    treated = np.flatnonzero(arr.treated_market)
    control = np.flatnonzero(~arr.treated_market)
    return np.concatenate([rng.choice(treated, size=treated.size, replace=True),
                           rng.choice(control, size=control.size, replace=True)])


def _spread(values: np.ndarray) -> float:
    """Two-pass sample standard deviation; exactly 0 for constant input."""
    if values.size < 2 or np.all(values == values[0]):
        return 0.0
    mean = values.mean()
    return float(np.sqrt(np.sum((values - mean) ** 2) / (values.size - 1)))


def _run_bootstrap(data: PanelDataset, boot: BootstrapConfig, replicate_fn) -> BootstrapResult:
    arr = data.arrays
    if not arr.treated_market.any() or arr.treated_market.all():
        raise BootstrapError("bootstrap needs treated and control markets")
    rows, failed, errors = [], 0, []
    for b in range(boot.B):
        rng = np.random.default_rng([boot.seed, b])
        sample = arr.resample(_resample_codes(arr, rng))
        try:
            res = replicate_fn(sample)
        except (MergerRetroError, np.linalg.LinAlgError, FloatingPointError) as exc:
            failed += 1
            errors.append(f"replicate {b}: {type(exc).__name__}: {exc}")
            continue
        rows.append({"replicate": b, **res})
    if failed > MAX_FAILED_SHARE * boot.B:
        raise BootstrapError(
            f"{failed} of {boot.B} bootstrap replicates failed (limit {MAX_FAILED_SHARE:.0%}); first: {errors[:3]}"
        )
    reps = pd.DataFrame(rows)
    params = [c for c in reps.columns if c != "replicate"]
    se = {p: _spread(reps[p].to_numpy(float)) for p in params}
    return BootstrapResult(se, reps, failed, boot.B, boot.seed)


def bootstrap_inference(
    data: PanelDataset,
    spec: StructuralSpec = StructuralSpec(),
    cfg: BootstrapConfig = BootstrapConfig(),
    sgmm: SgmmConfig = SgmmConfig(),
) -> BootstrapResult:
    """Stratified market block bootstrap of the synthetic-GMM headline estimates.

    Replicate ``b`` draws treated and control markets with replacement (each
    keeps its full time series; duplicates become distinct markets) using
    ``np.random.default_rng([seed, b])``, re-solves the weights and
    re-estimates.  Failed replicates are dropped; more than 10% failures
    raises :class:`BootstrapError`.
    """
    pre_q, post_q = list(data.plan.pre_quarters), list(data.plan.post_quarters)

    def replicate(sample: PanelArrays) -> dict:
        if sgmm.weights == "uniform":
            return estimate_structural_point(sample, spec)
        ws = _solve(sample, _outcome(sample, sgmm.outcome), pre_q, post_q, sgmm)
        return estimate_structural_point(sample, spec, _row_weights(sample, ws, pre_q))

    return _run_bootstrap(data, cfg, replicate)


# ------------------------------------------------------------ synthetic DiD
def _sdid_point(arr: PanelArrays, y: np.ndarray, ws: WeightSet | None, pre_q: list, post_q: list) -> float:
    M = arr.n_markets
    trt = arr.treated_market
    q0, t_pre = int(pre_q[0]), len(pre_q)
    col = arr.quarter - q0
    in_pre = (col >= 0) & (col < t_pre)
    pre_block = np.full((M, t_pre), np.nan)
    pre_block[arr.market[in_pre], col[in_pre]] = y[in_pre]
    in_post = (arr.quarter >= post_q[0]) & (arr.quarter <= post_q[-1])
    post_mean = np.bincount(arr.market[in_post], weights=y[in_post], minlength=M) / np.maximum(
        np.bincount(arr.market[in_post], minlength=M), 1)
    ctrl = np.flatnonzero(~trt)
    if ws is None:
        omega = np.full(ctrl.size, 1.0 / ctrl.size)
        tau = np.full(t_pre, 1.0 / t_pre)
    else:
        omega = np.array([ws.market_weights[arr.market_ids[i]] for i in ctrl])
        tau = np.array([ws.time_weights[int(q)] for q in pre_q])
    treated_post = y[in_post & arr.treated].mean()
    treated_pre = pre_block[trt].mean(axis=0) @ tau
    control_post = omega @ post_mean[ctrl]
    control_pre = omega @ pre_block[ctrl] @ tau
    return float((treated_post - treated_pre) - (control_post - control_pre))


def sdid_treatment_effect(
    data: PanelDataset,
    outcome: str = "price",
    boot: BootstrapConfig = BootstrapConfig(),
    cfg: SgmmConfig = SgmmConfig(),
    *,
    log_outcome: bool = False,
) -> tuple[float, float]:
    """Synthetic DiD treatment effect with a block-bootstrap standard error.

    Weights are solved on the residualised outcome; the effect itself is the
    weighted double difference of the outcome::

        (treated post mean - tau-weighted treated pre mean)
          - (omega-weighted control post mean - omega,tau-weighted control pre mean)
    """
    arr = data.arrays
    y = data.outcome(outcome, log=log_outcome)
    pre_q, post_q = list(data.plan.pre_quarters), list(data.plan.post_quarters)
    uniform = cfg.weights == "uniform"

    def point(sample: PanelArrays, yy: np.ndarray) -> float:
        ws = None if uniform else solve_weights(
            residualize_arrays(sample, yy, pre_q, post_q, cfg.residualize), cfg.zeta)
        return _sdid_point(sample, yy, ws, pre_q, post_q)

    estimate = point(arr, y)
    # Carry the outcome through resampling by storing it in the price slot of a copy.
    carrier = PanelArrays(arr.market, arr.quarter, y, arr.quantity, arr.Z, arr.W, arr.treated,
                          arr.merger_quarter, arr.market_ids, arr.treated_market, arr.starts, arr.regime)
    carrier_data = _ArraysOnly(carrier, data)
    res = _run_bootstrap(carrier_data, boot, lambda s: {"effect": point(s, s.price)})
    return estimate, res.se["effect"]


class _ArraysOnly:
    """Minimal stand-in exposing ``arrays`` and ``plan`` for the bootstrap loop."""

    def __init__(self, arrays: PanelArrays, data: PanelDataset) -> None:
        self.arrays = arrays
        self.plan = data.plan

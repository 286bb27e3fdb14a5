"""Linear IV / GMM engine and the structural demand-supply estimator.

The workhorse is :func:`solve_linear_iv`, a weighted two-stage least squares
solver with a market-clustered sandwich covariance.  Demand and supply moment
systems are assembled from a panel by :func:`build_demand_moments` and
:func:`build_supply_moments`; :func:`estimate_structural` estimates both
equations and derives the conduct change, average efficiency and the
aggregate price effect with delta-method standard errors.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ._linalg import RANK_TOL, cr1_factor, demean_within, group_codes, group_sum, symmetrize
from .errors import EquilibriumError, IdentificationError, PanelError
from .panel import PanelArrays, PanelDataset
from .report import EstimateReport, to_jsonable
from .structural import DENOMINATOR_TOL

__all__ = [
    "EfficiencyMode",
    "MomentSystem",
    "StructuralEstimate",
    "StructuralSpec",
    "build_demand_moments",
    "build_supply_moments",
    "efficiency_weights",
    "estimate_structural",
    "estimate_structural_point",
    "StructuralDifferencing",
    "first_stage_F",
    "solve_linear_iv",
]


class EfficiencyMode(str, enum.Enum):
    QUARTERLY = "quarterly"
    POOLED = "pooled"


class StructuralDifferencing(str, enum.Enum):
    FIXED_EFFECTS = "fixed_effects"
    FIRST_DIFFERENCE = "first_difference"


@dataclass(frozen=True)
class StructuralSpec:
    """Options of the structural estimator.

    Parameters
    ----------
    horizon : int
        Number of quarterly efficiency coefficients.
    conduct_regimes : bool
        Separate supply slopes for control, treated-pre and treated-post
        observations (otherwise one common slope and no conduct change).
    efficiency_mode : EfficiencyMode
        One coefficient per post-merger quarter, or a single step.
    differencing : StructuralDifferencing
        First differences (default) or market fixed effects.
    """

    horizon: int = 8
    conduct_regimes: bool = True
    efficiency_mode: EfficiencyMode = EfficiencyMode.QUARTERLY
    differencing: StructuralDifferencing = StructuralDifferencing.FIRST_DIFFERENCE

    def __post_init__(self) -> None:
        object.__setattr__(self, "efficiency_mode", EfficiencyMode(self.efficiency_mode))
        object.__setattr__(self, "differencing", StructuralDifferencing(self.differencing))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_efficiency(self) -> int:
        return self.horizon if self.efficiency_mode is EfficiencyMode.QUARTERLY else 1

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "conduct_regimes": self.conduct_regimes,
            "efficiency_mode": self.efficiency_mode.value,
            "differencing": self.differencing.value,
        }


@dataclass
class MomentSystem:
    """Instruments, regressors, outcome, observation weights and cluster ids.

    ``rows`` maps each moment row back to the panel row it was built from, so
    panel-level observation weights can be attached later.
    """

    instruments: np.ndarray
    regressors: np.ndarray
    outcome: np.ndarray
    cluster_ids: np.ndarray
    obs_weights: np.ndarray | None = None
    regressor_names: list = field(default_factory=list)
    instrument_names: list = field(default_factory=list)
    rows: np.ndarray | None = None
    label: str = ""

    def __post_init__(self) -> None:
        self.instruments = np.asarray(self.instruments, dtype=float)
        self.regressors = np.asarray(self.regressors, dtype=float)
        self.outcome = np.asarray(self.outcome, dtype=float).reshape(-1)
        n = self.outcome.size
        if self.instruments.ndim != 2 or self.regressors.ndim != 2:
            raise ValueError("instruments and regressors must be 2-D")
        if self.instruments.shape[0] != n or self.regressors.shape[0] != n:
            raise ValueError("instrument, regressor and outcome row counts differ")
        if self.obs_weights is None:
            self.obs_weights = np.ones(n)
        self.obs_weights = np.asarray(self.obs_weights, dtype=float).reshape(-1)
        if self.obs_weights.size != n or np.any(self.obs_weights < 0) or not np.all(np.isfinite(self.obs_weights)):
            raise ValueError("obs_weights must be finite, non-negative and one per row")
        self.cluster_ids = np.asarray(self.cluster_ids).reshape(-1)
        if self.cluster_ids.size != n:
            raise ValueError("cluster_ids must have one entry per row")
        L, K = self.instruments.shape[1], self.regressors.shape[1]
        if not self.regressor_names:
            self.regressor_names = [f"x{j}" for j in range(K)]
        if not self.instrument_names:
            self.instrument_names = [f"z{j}" for j in range(L)]
        if L < K:
            raise IdentificationError(f"order condition fails: {L} instruments for {K} regressors")
        zero = ~np.any(self.instruments != 0, axis=0)
        if zero.any():
            bad = [self.instrument_names[j] for j in np.flatnonzero(zero)]
            raise IdentificationError(f"all-zero instrument column(s): {bad}")

    @property
    def n_obs(self) -> int:
        return self.outcome.size

    def excluded_instruments(self) -> np.ndarray:
        """Mask of instruments that are not themselves regressors."""
        Z, X = self.instruments, self.regressors
        return np.array([not any(np.array_equal(Z[:, j], X[:, k]) for k in range(X.shape[1]))
                         for j in range(Z.shape[1])])

    def with_weights(self, weights: np.ndarray) -> "MomentSystem":
        return MomentSystem(self.instruments, self.regressors, self.outcome, self.cluster_ids,
                            self.obs_weights * np.asarray(weights, dtype=float), self.regressor_names,
                            self.instrument_names, self.rows, self.label)

    def subset(self, keep: np.ndarray) -> "MomentSystem":
        keep = np.asarray(keep)
        return MomentSystem(self.instruments[keep], self.regressors[keep], self.outcome[keep],
                            self.cluster_ids[keep], self.obs_weights[keep], self.regressor_names,
                            self.instrument_names, None if self.rows is None else self.rows[keep], self.label)

    def moment_mean(self, coefficients: np.ndarray) -> np.ndarray:
        """Weighted sample moment ``(1/n) sum_i w_i z_i (y_i - x_i'b)``."""
        u = self.outcome - self.regressors @ coefficients
        return (self.instruments * (self.obs_weights * u)[:, None]).sum(axis=0) / self.n_obs


# ------------------------------------------------------------------ IV solver
def _scaled_smallest_singular(matrix: np.ndarray) -> float:
    s = np.linalg.svd(matrix, compute_uv=False)
    return float(s[-1] / s[0]) if s.size and s[0] > 0 else 0.0


def _iv_core(system: MomentSystem, with_vcov: bool = True):
    Z, X, y, w = system.instruments, system.regressors, system.outcome, system.obs_weights
    Zw = Z * w[:, None]
    S = Zw.T @ Z
    A = X.T @ Zw
    b = Zw.T @ y
    zscale = np.sqrt(np.maximum(np.diag(S), 0.0))
    xscale = np.sqrt(np.maximum(np.einsum("ij,ij,i->j", X, X, w), 0.0))
    if np.any(zscale == 0) or np.any(xscale == 0):
        raise IdentificationError("instrument or regressor column has no weighted variation")
    Sn = S / np.outer(zscale, zscale)
    An = A / np.outer(xscale, zscale)
    try:
        chol = np.linalg.cholesky(Sn)
    except np.linalg.LinAlgError:
        raise IdentificationError(
            f"instruments are collinear (smallest singular value {np.linalg.svd(Sn, compute_uv=False)[-1]:.3e})"
        ) from None
    M = np.linalg.solve(chol, An.T).T  # An L^{-T}
    smin = _scaled_smallest_singular(M)
    if smin < RANK_TOL or _scaled_smallest_singular(chol) ** 2 < RANK_TOL:
        raise IdentificationError(f"rank condition fails (smallest scaled singular value {smin:.3e})")
    # Projection weights P = S^{-1} A'  (L x K)
    P = np.linalg.solve(S, A.T)
    H = A @ P
    beta = np.linalg.solve(H, P.T @ b)
    if not with_vcov:
        return beta, None, None
    u = y - X @ beta
    pos = w > 0
    n_eff = int(pos.sum())
    scores = (Zw @ P) * u[:, None]
    codes, n_groups = group_codes(system.cluster_ids[pos])
    sums = group_sum(scores[pos], codes, n_groups)
    Hinv = np.linalg.inv(H)
    vcov = symmetrize(cr1_factor(n_eff, n_groups, X.shape[1]) * Hinv @ (sums.T @ sums) @ Hinv.T)
    return beta, vcov, (n_eff, n_groups, smin)


def solve_linear_iv(system: MomentSystem) -> EstimateReport:
    """Weighted 2SLS ``(X'WZ (Z'WZ)^{-1} Z'WX)^{-1} X'WZ (Z'WZ)^{-1} Z'Wy``.

    Exactly identified systems reduce to ``(Z'WX)^{-1} Z'Wy``.  The covariance
    is clustered by ``cluster_ids`` with CR1 scaling, counting only rows with
    positive weight.

    Raises
    ------
    IdentificationError
        If the order or rank condition fails; the message carries the smallest
        singular value of the scaled cross-moment matrix.
    """
    beta, vcov, (n_eff, n_groups, smin) = _iv_core(system)
    method = "iv" if system.instruments.shape[1] == system.regressors.shape[1] else "2sls"
    return EstimateReport(list(system.regressor_names), beta, vcov, n_obs=n_eff, n_clusters=n_groups,
                          method=method, diagnostics={"min_scaled_singular_value": smin})


def first_stage_F(system: MomentSystem, endogenous_column: int) -> float:
    """Cluster-robust Wald F of the excluded instruments in one first-stage regression.

    The endogenous regressor is projected on all instruments (with the
    system's observation weights).  Returns ``+inf`` when the projection fits
    perfectly.
    """
    excluded = system.excluded_instruments()
    if not excluded.any():
        raise IdentificationError("no excluded instruments")
    x = system.regressors[:, endogenous_column]
    Z, w = system.instruments, system.obs_weights
    Zw = Z * w[:, None]
    S = Zw.T @ Z
    coef = np.linalg.solve(S, Zw.T @ x)
    resid = x - Z @ coef
    pos = w > 0
    scale = np.sqrt(np.sum(w * x * x))
    if np.sqrt(np.sum(w * resid * resid)) <= 1e-12 * max(scale, 1e-300):
        return float("inf")
    codes, n_groups = group_codes(system.cluster_ids[pos])
    sums = group_sum((Zw * resid[:, None])[pos], codes, n_groups)
    Sinv = np.linalg.inv(S)
    vcov = cr1_factor(int(pos.sum()), n_groups, Z.shape[1]) * Sinv @ (sums.T @ sums) @ Sinv
    idx = np.flatnonzero(excluded)
    b = coef[idx]
    V = symmetrize(vcov[np.ix_(idx, idx)])
    try:
        wald = float(b @ np.linalg.solve(V, b))
    except np.linalg.LinAlgError:
        return float("inf")
    if not np.isfinite(wald) or wald < 0:
        return float("inf")
    return wald / idx.size


# -------------------------------------------------------------- moment builders
def _arrays(data: PanelDataset | PanelArrays) -> PanelArrays:
    return data.arrays if isinstance(data, PanelDataset) else data


def _consecutive_pairs(arr: PanelArrays) -> tuple[np.ndarray, np.ndarray]:
    m, q = arr.market, arr.quarter
    ok = (m[1:] == m[:-1]) & (q[1:] == q[:-1] + 1)
    cur = np.flatnonzero(ok) + 1
    return cur, cur - 1


def _row_weights(row_weights: np.ndarray | None, rows: np.ndarray) -> np.ndarray | None:
    return None if row_weights is None else np.asarray(row_weights, dtype=float)[rows]


def build_demand_moments(
    data: PanelDataset | PanelArrays,
    spec: StructuralSpec = StructuralSpec(),
    row_weights: np.ndarray | None = None,
) -> MomentSystem:
    """Demand moments: price instrumented by cost shifters.

    First differences: outcome ``dQ``, regressors ``[1, dP, dZ]``,
    instruments ``[1, dW, dZ]``.  Fixed effects: the same blocks in levels,
    demeaned within market (weighted by ``row_weights`` when given), with the
    intercept absorbed.
    """
    arr = _arrays(data)
    p, q = arr.Z.shape[1], arr.W.shape[1]
    if q == 0:
        raise IdentificationError("order condition fails: demand needs at least one cost shifter (q >= 1)")
    if np.any(np.isnan(arr.quantity)):
        raise PanelError("quantity is missing for some observations")
    z_names = [f"alpha2_{j + 1}" for j in range(p)]
    if spec.differencing is StructuralDifferencing.FIRST_DIFFERENCE:
        cur, prev = _consecutive_pairs(arr)
        if cur.size == 0:
            raise PanelError("missing lags: no consecutive quarters for first differences")
        dP = arr.price[cur] - arr.price[prev]
        dZ = arr.Z[cur] - arr.Z[prev]
        dW = arr.W[cur] - arr.W[prev]
        ones = np.ones(cur.size)
        X = np.column_stack([ones, dP, dZ])
        Zm = np.column_stack([ones, dW, dZ])
        y = arr.quantity[cur] - arr.quantity[prev]
        rows = cur
        names = ["intercept", "alpha1", *z_names]
        inames = ["intercept", *[f"w_{j + 1}" for j in range(q)], *z_names]
    else:
        rows = np.arange(arr.n_obs)
        w = _row_weights(row_weights, rows)
        block = np.column_stack([arr.quantity, arr.price, arr.Z, arr.W])
        block = demean_within(block, arr.market, arr.n_markets, w)
        y = block[:, 0]
        X = np.column_stack([block[:, 1], block[:, 2:2 + p]])
        Zm = np.column_stack([block[:, 2 + p:], block[:, 2:2 + p]])
        names = ["alpha1", *z_names]
        inames = [*[f"w_{j + 1}" for j in range(q)], *z_names]
    return MomentSystem(Zm, X, y, arr.market[rows], _row_weights(row_weights, rows), names, inames, rows, "demand")


def _transition_steps(arr: PanelArrays, rows: np.ndarray, n_eff: int, pooled: bool) -> np.ndarray:
    mq = arr.merger_quarter
    tr = arr.treated[rows]
    qq = arr.quarter[rows]
    if pooled:
        return (tr & (qq == mq)).astype(float)[:, None]
    return np.column_stack([(tr & (qq == mq + k)).astype(float) for k in range(n_eff)])


def build_supply_moments(
    data: PanelDataset | PanelArrays,
    spec: StructuralSpec = StructuralSpec(),
    row_weights: np.ndarray | None = None,
) -> MomentSystem:
    """Supply (pricing) moments with regime-specific slopes and efficiency terms.

    First differences with conduct regimes (outcome ``dP``)::

        regressors  [1, D_ctrl dQ, D_pre dQ, D_post dQ, Q_lag*Trans, dW, Trans_1..Trans_T]
        instruments [1, D_ctrl dZ, D_pre dZ, D_post dZ, Z_lag*Trans, dW, Trans_1..Trans_T]

    where ``Trans_k`` is 1 for a treated market in its ``k``-th post-merger
    quarter and ``Trans = Trans_1``.  Without regimes, or on a control-only
    panel, a single ``dQ`` slope instrumented by ``dZ`` is used and the level
    term is dropped.  Fixed effects: levels demeaned within market with
    cumulative post-merger dummies in place of transition dummies.
    """
    arr = _arrays(data)
    p, q = arr.Z.shape[1], arr.W.shape[1]
    if p == 0:
        raise IdentificationError("order condition fails: supply needs at least one demand shifter (p >= 1)")
    if np.any(np.isnan(arr.quantity)):
        raise PanelError("quantity is missing for some observations")
    has_treated = bool(arr.treated.any())
    regimes = spec.conduct_regimes and has_treated and bool((~arr.treated).any())
    pooled = spec.efficiency_mode is EfficiencyMode.POOLED
    n_eff = spec.n_efficiency
    mq = arr.merger_quarter
    w_names = [f"theta2_{j + 1}" for j in range(q)]
    eff_names = ["theta3"] if pooled else [f"theta3_{k + 1}" for k in range(n_eff)]

    if spec.differencing is StructuralDifferencing.FIRST_DIFFERENCE:
        cur, prev = _consecutive_pairs(arr)
        if cur.size == 0:
            raise PanelError("missing lags: no consecutive quarters for first differences")
        tr = arr.treated[cur]
        post = arr.quarter[cur] >= mq
        dP = arr.price[cur] - arr.price[prev]
        dQ = arr.quantity[cur] - arr.quantity[prev]
        dZ = arr.Z[cur] - arr.Z[prev]
        dW = arr.W[cur] - arr.W[prev]
        ones = np.ones(cur.size)
        if has_treated:
            trans = _transition_steps(arr, cur, n_eff, pooled)
            if not trans[:, 0].any():
                raise IdentificationError("no transition observations: no treated market is observed entering the merger")
            observed_steps = int(trans.any(axis=0).sum())
            if observed_steps < trans.shape[1]:
                raise PanelError(
                    f"horizon {n_eff} exceeds the {observed_steps} observed post-merger transition quarters"
                )
        else:
            trans = np.zeros((cur.size, 0))
            eff_names = []
        if regimes:
            d = [(~tr).astype(float), (tr & ~post).astype(float), (tr & post).astype(float)]
            level = trans[:, 0]
            X = np.column_stack([ones, *(dj * dQ for dj in d), arr.quantity[prev] * level, dW, trans])
            Zm = np.column_stack([ones, *(dj[:, None] * dZ for dj in d), arr.Z[prev] * level[:, None], dW, trans])
            names = ["intercept", "gamma_ctrl", "gamma_pre", "gamma_post", "conduct_level", *w_names, *eff_names]
            inames = ["intercept"]
            for tag in ("ctrl", "pre", "post"):
                inames += [f"dz_{j + 1}_{tag}" for j in range(p)]
            inames += [f"zlag_{j + 1}_transition" for j in range(p)] + w_names + eff_names
        else:
            X = np.column_stack([ones, dQ, dW, trans])
            Zm = np.column_stack([ones, dZ, dW, trans])
            names = ["intercept", "gamma", *w_names, *eff_names]
            inames = ["intercept", *[f"dz_{j + 1}" for j in range(p)], *w_names, *eff_names]
        y = dP
        rows = cur
    else:
        rows = np.arange(arr.n_obs)
        tr = arr.treated
        post = arr.quarter >= mq
        if has_treated:
            if pooled:
                steps = (tr & post).astype(float)[:, None]
            else:
                steps = np.column_stack([(tr & (arr.quarter >= mq + k)).astype(float) for k in range(n_eff)])
            if not steps[:, 0].any():
                raise IdentificationError("no post-merger treated observations")
        else:
            steps = np.zeros((arr.n_obs, 0))
            eff_names = []
        if regimes:
            d = [(~tr).astype(float), (tr & ~post).astype(float), (tr & post).astype(float)]
            Xraw = np.column_stack([*(dj * arr.quantity for dj in d), arr.W, steps])
            Zraw = np.column_stack([*(dj[:, None] * arr.Z for dj in d), arr.W, steps])
            names = ["gamma_ctrl", "gamma_pre", "gamma_post", *w_names, *eff_names]
            inames = []
            for tag in ("ctrl", "pre", "post"):
                inames += [f"z_{j + 1}_{tag}" for j in range(p)]
            inames += w_names + eff_names
        else:
            Xraw = np.column_stack([arr.quantity, arr.W, steps])
            Zraw = np.column_stack([arr.Z, arr.W, steps])
            names = ["gamma", *w_names, *eff_names]
            inames = [*[f"z_{j + 1}" for j in range(p)], *w_names, *eff_names]
        w = _row_weights(row_weights, rows)
        kx = Xraw.shape[1]
        block = demean_within(np.column_stack([arr.price, Xraw, Zraw]), arr.market, arr.n_markets, w)
        y = block[:, 0]
        X = block[:, 1:1 + kx]
        Zm = block[:, 1 + kx:]
    return MomentSystem(Zm, X, y, arr.market[rows], _row_weights(row_weights, rows), names, inames, rows, "supply")


# ------------------------------------------------------------ structural model
def efficiency_weights(horizon: int) -> np.ndarray:
    """Share of post-merger quarters exposed to each quarterly step: ``(T+1-k)/T``."""
    return np.arange(horizon, 0, -1, dtype=float) / horizon


@dataclass
class StructuralEstimate:
    """Demand slope, conduct change, efficiency and price effect with standard errors."""

    demand: EstimateReport
    supply: EstimateReport
    alpha1: float
    alpha1_se: float
    slopes: dict
    slopes_vcov: np.ndarray
    delta_lambda: float
    delta_lambda_se: float
    efficiency_by_quarter: np.ndarray
    efficiency_vcov: np.ndarray
    average_efficiency: float
    average_efficiency_se: float
    price_effect: float
    price_effect_se: float
    diagnostics: dict = field(default_factory=dict)
    spec: StructuralSpec = field(default_factory=StructuralSpec)
    weights: Any = None
    bootstrap: dict | None = None

    def headline(self) -> dict:
        return {
            "alpha1": self.alpha1,
            "delta_lambda": self.delta_lambda,
            "average_efficiency": self.average_efficiency,
            "price_effect": self.price_effect,
        }

    def to_dict(self) -> dict:
        out = {
            "spec": self.spec.to_dict(),
            "demand": {
                "coefficients": dict(zip(self.demand.names, self.demand.coefficients)),
                "se": dict(zip(self.demand.names, self.demand.se)),
                "alpha1": self.alpha1,
                "alpha1_se": self.alpha1_se,
            },
            "conduct": {
                "slopes": self.slopes,
                "slopes_se": dict(zip(self.slopes, np.sqrt(np.clip(np.diag(self.slopes_vcov), 0, None)))),
                "delta_lambda": self.delta_lambda,
                "delta_lambda_se": self.delta_lambda_se,
            },
            "efficiency": {
                "by_quarter": self.efficiency_by_quarter,
                "by_quarter_se": np.sqrt(np.clip(np.diag(self.efficiency_vcov), 0, None)),
                "average_efficiency": self.average_efficiency,
                "average_efficiency_se": self.average_efficiency_se,
            },
            "price_effect": {"estimate": self.price_effect, "se": self.price_effect_se},
            "supply": {
                "coefficients": dict(zip(self.supply.names, self.supply.coefficients)),
                "se": dict(zip(self.supply.names, self.supply.se)),
            },
            "n_obs": {"demand": self.demand.n_obs, "supply": self.supply.n_obs},
            "diagnostics": self.diagnostics,
        }
        if self.weights is not None:
            out["weights"] = self.weights.to_dict()
        if self.bootstrap is not None:
            out["bootstrap"] = self.bootstrap
        return to_jsonable(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, title: str = "Structural estimates") -> str:
        se = self.bootstrap["se"] if self.bootstrap else {}
        rows = [
            ("Demand slope (alpha1)", self.alpha1, se.get("alpha1", self.alpha1_se)),
            ("Change in conduct", self.delta_lambda, se.get("delta_lambda", self.delta_lambda_se)),
            ("Average efficiency", self.average_efficiency, se.get("average_efficiency", self.average_efficiency_se)),
            ("Aggregate price effect", self.price_effect, se.get("price_effect", self.price_effect_se)),
        ]
        lines = [title]
        for label, est, s in rows:
            lines.append(f"{label:<28} {est:>10.4f}  ({s:.4f})")
        for k, (b, s) in enumerate(zip(self.efficiency_by_quarter, np.sqrt(np.clip(np.diag(self.efficiency_vcov), 0, None)))):
            lines.append(f"{'  efficiency, quarter ' + str(k + 1):<28} {b:>10.4f}  ({s:.4f})")
        lines.append(f"{'Observations (supply)':<28} {self.supply.n_obs:>10d}")
        return "\n".join(lines) + "\n"


def _derived(alpha1, gammas: dict, eff: np.ndarray, spec: StructuralSpec):
    """Point values of the conduct change, average efficiency and price effect."""
    if "gamma_post" in gammas:
        g_pre, g_post = gammas["gamma_pre"], gammas["gamma_post"]
    else:
        g_pre = g_post = gammas["gamma"]
    dl = -alpha1 * (g_post - g_pre)
    quarterly = spec.efficiency_mode is EfficiencyMode.QUARTERLY
    w = efficiency_weights(eff.size) if quarterly and eff.size else np.ones(eff.size)
    avg = float(w @ eff) if eff.size else 0.0
    denom = 1.0 - g_post * alpha1
    if abs(denom) < DENOMINATOR_TOL:
        raise EquilibriumError(f"pass-through denominator 1 - gamma*alpha1 = {denom:.3e} is singular")
    return dl, avg, avg / denom, w, denom, g_post


def _fit(arr: PanelArrays, spec: StructuralSpec, row_weights=None, with_vcov: bool = True):
    dsys = build_demand_moments(arr, spec, row_weights)
    ssys = build_supply_moments(arr, spec, row_weights)
    if not with_vcov:
        dbeta, _, _ = _iv_core(dsys, with_vcov=False)
        sbeta, _, _ = _iv_core(ssys, with_vcov=False)
        alpha1 = dbeta[dsys.regressor_names.index("alpha1")]
        gammas = {n: sbeta[i] for i, n in enumerate(ssys.regressor_names) if n.startswith("gamma")}
        eff = np.array([sbeta[i] for i, n in enumerate(ssys.regressor_names) if n.startswith("theta3")])
        dl, avg, pe, _, _, _ = _derived(alpha1, gammas, eff, spec)
        return {"alpha1": float(alpha1), "delta_lambda": float(dl), "average_efficiency": avg, "price_effect": float(pe)}
    return dsys, ssys, solve_linear_iv(dsys), solve_linear_iv(ssys)


def _assemble(dsys, ssys, demand: EstimateReport, supply: EstimateReport, spec: StructuralSpec) -> StructuralEstimate:
    ia = demand.names.index("alpha1")
    alpha1 = demand["alpha1"]
    var_a = demand.vcov[ia, ia]
    gnames = [n for n in supply.names if n.startswith("gamma")]
    enames = [n for n in supply.names if n.startswith("theta3")]
    gammas = {n: supply[n] for n in gnames}
    eff = np.array([supply[n] for n in enames])
    dl, avg, pe, w, denom, g_post = _derived(alpha1, gammas, eff, spec)

    # Joint covariance of (alpha1, supply coefficients) is block diagonal across equations.
    sv = supply.vcov
    idx = {n: supply.names.index(n) for n in supply.names}
    if "gamma_post" in gammas:
        pre_i, post_i = idx["gamma_pre"], idx["gamma_post"]
        g_pre = gammas["gamma_pre"]
        grad_a = -(g_post - g_pre)
        g_s = np.zeros(len(supply.names))
        g_s[post_i], g_s[pre_i] = -alpha1, alpha1
        dl_var = grad_a ** 2 * var_a + g_s @ sv @ g_s
        post_idx = post_i
    else:
        dl_var = 0.0
        post_idx = idx["gamma"]

    e_idx = [idx[n] for n in enames]
    ev = sv[np.ix_(e_idx, e_idx)] if e_idx else np.zeros((0, 0))
    avg_var = float(w @ ev @ w) if e_idx else 0.0

    g_s = np.zeros(len(supply.names))
    for k, i in enumerate(e_idx):
        g_s[i] = w[k] / denom
    g_s[post_idx] += avg * alpha1 / denom ** 2
    grad_a = avg * g_post / denom ** 2
    pe_var = grad_a ** 2 * var_a + g_s @ sv @ g_s

    g_idx = [idx[n] for n in gnames]
    diagnostics = {
        "first_stage_F": {
            "demand_alpha1": first_stage_F(dsys, dsys.regressor_names.index("alpha1")),
            **{f"supply_{n}": first_stage_F(ssys, ssys.regressor_names.index(n))
               for n in ssys.regressor_names if n.startswith("gamma") or n == "conduct_level"},
        },
        "n_obs_demand": demand.n_obs,
        "n_obs_supply": supply.n_obs,
        "n_clusters": supply.n_clusters,
        "passthrough_denominator": denom,
    }
    return StructuralEstimate(
        demand=demand,
        supply=supply,
        alpha1=float(alpha1),
        alpha1_se=float(np.sqrt(max(var_a, 0.0))),
        slopes={n: float(v) for n, v in gammas.items()},
        slopes_vcov=sv[np.ix_(g_idx, g_idx)],
        delta_lambda=float(dl),
        delta_lambda_se=float(np.sqrt(max(dl_var, 0.0))),
        efficiency_by_quarter=eff,
        efficiency_vcov=ev,
        average_efficiency=avg,
        average_efficiency_se=float(np.sqrt(max(avg_var, 0.0))),
        price_effect=float(pe),
        price_effect_se=float(np.sqrt(max(pe_var, 0.0))),
        diagnostics=diagnostics,
        spec=spec,
    )


def estimate_structural(
    data: PanelDataset | PanelArrays,
    spec: StructuralSpec = StructuralSpec(),
    row_weights: np.ndarray | None = None,
) -> StructuralEstimate:
    """Estimate demand, then supply, and derive the merger effects.

    Parameters
    ----------
    data : PanelDataset or PanelArrays
    spec : StructuralSpec
    row_weights : array, optional
        Per-panel-row observation weights applied to both equations.

    Returns
    -------
    StructuralEstimate
        ``delta_lambda = -alpha1 (gamma_post - gamma_pre)``; average
        efficiency ``sum_k theta3_k (T+1-k)/T``; price effect = average
        efficiency over ``1 - gamma_post alpha1``.  Standard errors use the
        delta method with a block-diagonal covariance across the two
        equations.
    """
    arr = _arrays(data)
    dsys, ssys, demand, supply = _fit(arr, spec, row_weights)
    return _assemble(dsys, ssys, demand, supply, spec)


def estimate_structural_point(arr: PanelArrays, spec: StructuralSpec, row_weights=None) -> dict:
    """Headline point estimates only (no covariance); used inside bootstrap loops."""
    return _fit(arr, spec, row_weights, with_vcov=False)

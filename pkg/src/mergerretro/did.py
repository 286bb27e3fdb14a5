"""Difference-in-differences estimators for merger retrospectives.

Three families are provided:

* two-way fixed effects (market and quarter effects absorbed by demeaning),
* trend-adjusted fixed effects, either estimating the trends jointly with the
  treatment effect or fitting them on pre-merger data and detrending,
* a first-difference event study with one transition dummy per post-merger
  quarter.

All standard errors are clustered by market with the CR1 small-sample factor.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._linalg import (
    cluster_meat,
    cr1_factor,
    demean_two_way,
    demean_within,
    group_codes,
    group_sum,
    smallest_singular_ratio,
    RANK_TOL,
    symmetrize,
)
from .errors import IdentificationError, PanelError
from .panel import PanelDataset
from .report import EstimateReport

__all__ = [
    "DidSpec",
    "Differencing",
    "TrendMethod",
    "TrendMode",
    "aggregate_event_effects",
    "did_first_difference_event_study",
    "did_fixed_effects",
    "did_with_trends",
    "event_weights",
    "percent_transform",
]


class TrendMode(str, enum.Enum):
    NONE = "none"
    GROUP = "group"
    MARKET = "market"


class TrendMethod(str, enum.Enum):
    JOINT = "joint"
    PRE_ESTIMATE = "pre_estimate"


class Differencing(str, enum.Enum):
    FIXED_EFFECTS = "fixed_effects"
    FIRST_DIFFERENCE = "first_difference"


@dataclass(frozen=True)
class DidSpec:
    """Configuration shared by the DiD estimators.

    Parameters
    ----------
    outcome : str
        Column of the panel frame used as the dependent variable.
    log_outcome : bool
        Take logs of the outcome first.
    controls : tuple of str
        Extra time-varying regressors.
    trend_mode, trend_method
        Trend adjustment; only meaningful with fixed effects.
    differencing : Differencing
    event_horizon : int
        Number of post-merger transition dummies in the event study.
    """

    outcome: str = "price"
    log_outcome: bool = False
    controls: tuple = field(default_factory=tuple)
    trend_mode: TrendMode = TrendMode.NONE
    trend_method: TrendMethod = TrendMethod.JOINT
    differencing: Differencing = Differencing.FIXED_EFFECTS
    event_horizon: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "trend_mode", TrendMode(self.trend_mode))
        object.__setattr__(self, "trend_method", TrendMethod(self.trend_method))
        object.__setattr__(self, "differencing", Differencing(self.differencing))
        object.__setattr__(self, "controls", tuple(self.controls))
        if self.event_horizon < 1:
            raise ValueError("event_horizon must be >= 1")
        if self.trend_mode is not TrendMode.NONE and self.differencing is not Differencing.FIXED_EFFECTS:
            raise ValueError("trend adjustment requires fixed-effects differencing")


# --------------------------------------------------------------------- helpers
def _fit_clustered(
    y: np.ndarray,
    X: np.ndarray,
    clusters: np.ndarray,
    names: list[str],
    method: str,
    diagnostics: dict | None = None,
) -> EstimateReport:
    """OLS of already-transformed data with a CR1 market-clustered covariance."""
    n, k = X.shape
    smin, ratio = smallest_singular_ratio(X) if k else (1.0, 1.0)
    if n < k or ratio < RANK_TOL:
        raise IdentificationError(
            f"regressors are collinear after absorbing fixed effects (smallest singular value {smin:.3e})"
        )
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    meat, n_clusters = cluster_meat(X * resid[:, None], clusters)
    vcov = symmetrize(cr1_factor(n, n_clusters, k) * xtx_inv @ meat @ xtx_inv)
    diag = {"residual_ss": float(resid @ resid)}
    diag.update(diagnostics or {})
    return EstimateReport(names, beta, vcov, n_obs=n, n_clusters=n_clusters, method=method, diagnostics=diag)


def _inputs(data: PanelDataset, spec: DidSpec):
    f = data.frame
    y = data.outcome(spec.outcome, log=spec.log_outcome)
    missing = [c for c in spec.controls if c not in f.columns]
    if missing:
        raise PanelError(f"missing control columns {missing}")
    X = f[list(spec.controls)].to_numpy(float).reshape(len(f), len(spec.controls))
    unit, _ = group_codes(f["market"].to_numpy())
    time, _ = group_codes(f["quarter"].to_numpy())
    return y, X, unit, time


def _require_shape(data: PanelDataset, indicator: np.ndarray) -> None:
    if len(data.markets) < 2 or len(data.quarters) < 2:
        raise PanelError("fixed-effects DiD needs at least 2 markets and 2 quarters")
    if not indicator.any():
        raise IdentificationError("no treated post-merger observations")


def _demean_market_trend(values: np.ndarray, unit: np.ndarray, t: np.ndarray, n_units: int) -> np.ndarray:
    """Residual of each market's own regression on ``[1, t]``."""
    single = values.ndim == 1
    v = values[:, None] if single else values
    ones = np.ones_like(t, dtype=float)
    cnt = np.bincount(unit, weights=ones, minlength=n_units)
    safe = np.where(cnt > 0, cnt, 1.0)
    t_bar = np.bincount(unit, weights=t, minlength=n_units) / safe
    tc = t - t_bar[unit]
    stt = np.bincount(unit, weights=tc * tc, minlength=n_units)
    v_bar = group_sum(v, unit, n_units) / safe[:, None]
    vc = v - v_bar[unit]
    stv = group_sum(vc * tc[:, None], unit, n_units)
    slope = np.where(stt[:, None] > 0, stv / np.where(stt > 0, stt, 1.0)[:, None], 0.0)
    out = vc - slope[unit] * tc[:, None]
    return out[:, 0] if single else out


def _absorb_market_trends(values: np.ndarray, unit: np.ndarray, time: np.ndarray, t: np.ndarray,
                          tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Absorb market intercepts, market slopes and quarter effects by alternating projections."""
    n_units = int(unit.max()) + 1
    n_times = int(time.max()) + 1
    x = np.array(values, dtype=float, copy=True)
    scale = max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    for _ in range(max_iter):
        prev = x
        x = _demean_market_trend(x, unit, t, n_units)
        x = demean_within(x, time, n_times)
        if np.max(np.abs(x - prev), initial=0.0) < tol * scale:
            return x
    raise IdentificationError("market-trend absorption did not converge")


# ------------------------------------------------------------------ estimators
def did_fixed_effects(data: PanelDataset, spec: DidSpec = DidSpec()) -> EstimateReport:
    """Two-way fixed-effects DiD of the outcome on the treatment indicator.

    Returns a report whose first coefficient is ``beta_did``.
    """
    if spec.differencing is not Differencing.FIXED_EFFECTS:
        raise ValueError("did_fixed_effects requires fixed-effects differencing")
    y, X, unit, time = _inputs(data, spec)
    indicator = data.indicator().astype(float)
    _require_shape(data, indicator)
    design = np.column_stack([indicator, X])
    stacked = demean_two_way(np.column_stack([y, design]), unit, time)
    return _fit_clustered(
        stacked[:, 0], stacked[:, 1:], unit, ["beta_did", *spec.controls], method="fixed_effects",
        diagnostics={"trend_mode": TrendMode.NONE.value},
    )


def _pre_trend_slopes(y: np.ndarray, unit: np.ndarray, t: np.ndarray, pre: np.ndarray,
                      treated_rows: np.ndarray, mode: TrendMode, markets: list) -> np.ndarray:
    """Per-row trend slope fitted on pre-merger observations only."""
    n_units = int(unit.max()) + 1
    if mode is TrendMode.MARKET:
        counts = np.bincount(unit[pre], minlength=n_units)
        short = np.flatnonzero(counts < 2)
        if short.size:
            raise PanelError(
                f"markets with fewer than 2 pre-merger observations: {[markets[i] for i in short[:5]]}"
            )
        up, tp, yp = unit[pre], t[pre].astype(float), y[pre]
        cnt = counts.astype(float)
        t_bar = np.bincount(up, weights=tp, minlength=n_units) / cnt
        y_bar = np.bincount(up, weights=yp, minlength=n_units) / cnt
        tc = tp - t_bar[up]
        stt = np.bincount(up, weights=tc * tc, minlength=n_units)
        sty = np.bincount(up, weights=tc * (yp - y_bar[up]), minlength=n_units)
        slope = sty / stt
        return slope[unit]
    # Group trends: within-market demeaned pre-period regression on t x group.
    n_pre_units = n_units
    tc = demean_within(t[pre].astype(float), unit[pre], n_pre_units)
    yc = demean_within(y[pre], unit[pre], n_pre_units)
    g = treated_rows[pre]
    slopes = np.zeros(2)
    for grp in (0, 1):
        sel = g == grp
        denom = tc[sel] @ tc[sel]
        if denom <= 0:
            raise PanelError("a group lacks pre-merger time variation for trend estimation")
        slopes[grp] = (tc[sel] @ yc[sel]) / denom
    return slopes[treated_rows.astype(int)]


def did_with_trends(data: PanelDataset, spec: DidSpec) -> EstimateReport:
    """Trend-adjusted fixed-effects DiD.

    ``TrendMethod.JOINT`` estimates trends and the treatment effect together on
    the full sample: group trends enter as a ``t * treated`` regressor (the
    common trend is absorbed by quarter effects), market trends are absorbed
    with the fixed effects.  ``TrendMethod.PRE_ESTIMATE`` fits linear trends
    on pre-merger quarters only, removes the extrapolated trend from every
    observation and runs :func:`did_fixed_effects` on the detrended outcome;
    its standard errors ignore the first-stage trend uncertainty.
    """
    if spec.trend_mode is TrendMode.NONE:
        raise ValueError("did_with_trends requires a trend_mode")
    y, X, unit, time = _inputs(data, spec)
    f = data.frame
    t = f["quarter"].to_numpy(float)
    treated_rows = f["treated"].to_numpy(int)
    indicator = data.indicator().astype(float)
    _require_shape(data, indicator)
    diag = {"trend_mode": spec.trend_mode.value, "trend_method": spec.trend_method.value}

    if spec.trend_method is TrendMethod.JOINT:
        if spec.trend_mode is TrendMode.GROUP:
            design = np.column_stack([indicator, t * treated_rows, X])
            stacked = demean_two_way(np.column_stack([y, design]), unit, time)
            names = ["beta_did", "group_trend", *spec.controls]
        else:
            design = np.column_stack([indicator, X])
            stacked = _absorb_market_trends(np.column_stack([y, design]), unit, time, t)
            names = ["beta_did", *spec.controls]
        return _fit_clustered(stacked[:, 0], stacked[:, 1:], unit, names, method="trends_joint", diagnostics=diag)

    pre = t < data.plan.merger_quarter
    slope = _pre_trend_slopes(y, unit, t, pre, treated_rows, spec.trend_mode, data.markets)
    detrended = y - slope * t
    design = np.column_stack([indicator, X])
    stacked = demean_two_way(np.column_stack([detrended, design]), unit, time)
    return _fit_clustered(
        stacked[:, 0], stacked[:, 1:], unit, ["beta_did", *spec.controls], method="trends_pre_estimate",
        diagnostics=diag,
    )


def _first_differences(data: PanelDataset, columns: list[np.ndarray]):
    """Row pairs ``(t-1, t)`` within markets; drops markets observed only once."""
    f = data.frame
    market = f["market"].to_numpy()
    quarter = f["quarter"].to_numpy()
    counts = f.groupby("market")["quarter"].transform("size").to_numpy()
    singles = sorted(set(market[counts == 1]))
    if singles:
        warnings.warn(f"dropping {len(singles)} market(s) observed only once: {singles[:5]}", stacklevel=3)
    same = market[1:] == market[:-1]
    consecutive = same & (quarter[1:] == quarter[:-1] + 1)
    cur = np.flatnonzero(consecutive) + 1
    prev = cur - 1
    diffs = [c[cur] - c[prev] for c in columns]
    return cur, prev, diffs, len(singles)


def did_first_difference_event_study(data: PanelDataset, spec: DidSpec) -> EstimateReport:
    """First-difference event study with transition dummies.

    The dummy for step ``k`` is 1 only for a treated market in quarter
    ``merger_quarter + k - 1``, the quarter it enters its ``k``-th post-merger
    quarter.  Quarter effects enter as an intercept plus dummies for every
    differenced quarter except the first.  Returns ``beta_1..beta_T``.
    """
    if spec.differencing is not Differencing.FIRST_DIFFERENCE:
        raise ValueError("event study requires first-difference differencing")
    y, X, _, _ = _inputs(data, spec)
    f = data.frame
    quarter = f["quarter"].to_numpy()
    treated_rows = f["treated"].to_numpy(int).astype(bool)
    horizon = spec.event_horizon
    mq = data.plan.merger_quarter

    cur, prev, (dy, *dx), n_dropped = _first_differences(data, [y, *X.T])
    q_cur = quarter[cur]
    tr_cur = treated_rows[cur]
    available = len(set(q_cur[tr_cur & (q_cur >= mq)]))
    if horizon > available:
        raise PanelError(f"event horizon {horizon} exceeds the {available} observed post-merger quarters")
    steps = np.column_stack([(tr_cur & (q_cur == mq + k - 1)).astype(float) for k in range(1, horizon + 1)])

    diff_quarters = np.unique(q_cur)
    qdum = (q_cur[:, None] == diff_quarters[None, 1:]).astype(float)
    dX = np.column_stack(dx) if dx else np.zeros((cur.size, 0))
    design = np.column_stack([steps, dX, np.ones(cur.size), qdum])
    names = [f"beta_{k}" for k in range(1, horizon + 1)] + list(spec.controls)
    names += ["intercept"] + [f"quarter_{q}" for q in diff_quarters[1:]]
    clusters = f["market"].to_numpy()[cur]
    rep = _fit_clustered(dy, design, clusters, names, method="first_difference_event_study",
                         diagnostics={"dropped_single_markets": n_dropped, "horizon": horizon})
    keep = [n for n in names if n.startswith("beta_") or n in spec.controls]
    idx = [names.index(n) for n in keep]
    return EstimateReport(keep, rep.coefficients[idx], rep.vcov[np.ix_(idx, idx)], rep.n_obs,
                          rep.n_clusters, method=rep.method, diagnostics=rep.diagnostics)


# ----------------------------------------------------------------- transforms
def percent_transform(beta: float) -> float:
    """Percent change implied by a log-point coefficient: ``(exp(beta) - 1) * 100``."""
    return float(np.expm1(beta) * 100.0)


def event_weights(horizon: int) -> np.ndarray:
    """Linearly declining weights ``w_k ∝ T + 1 - k``, normalised to sum to one."""
    raw = np.arange(horizon, 0, -1, dtype=float)
    return raw / raw.sum()


def aggregate_event_effects(betas, vcov) -> tuple[float, float]:
    """Weighted average of ``exp(beta_k) - 1`` with a delta-method standard error.

    Raises
    ------
    ValueError
        If ``vcov`` is not square, not conformable or not positive semidefinite.
    """
    betas = np.asarray(betas, dtype=float).reshape(-1)
    vcov = np.asarray(vcov, dtype=float)
    horizon = betas.size
    if vcov.shape != (horizon, horizon):
        raise ValueError(f"vcov must be {horizon}x{horizon}")
    if not np.allclose(vcov, vcov.T, rtol=1e-10, atol=1e-14):
        raise ValueError("vcov is not symmetric")
    eig = np.linalg.eigvalsh(symmetrize(vcov))
    if eig.size and eig.min() < -1e-10 * max(1.0, abs(eig.max())):
        raise ValueError(f"vcov is not positive semidefinite (min eigenvalue {eig.min():.3e})")
    w = event_weights(horizon)
    estimate = float(w @ np.expm1(betas))
    grad = w * np.exp(betas)
    se = float(np.sqrt(max(grad @ vcov @ grad, 0.0)))
    return estimate, se

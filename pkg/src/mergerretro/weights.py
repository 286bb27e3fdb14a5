"""Synthetic difference-in-differences unit and time weights.

Unit weights ``omega`` solve a ridge-penalised simplex least-squares problem
matching the treated pre-merger mean path with an intercept; time weights
``tau`` solve the unpenalised analogue matching control post-merger means
from pre-merger columns.  Both use accelerated projected gradient with
restart on the simplex, started at the uniform point, followed by an exact
active-set polish that certifies the KKT conditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._linalg import ols
from .errors import PanelError, WeightSolverError
from .panel import PanelArrays, PanelDataset

__all__ = [
    "ResidualizedBlock",
    "SimplexSolution",
    "WeightSet",
    "auto_zeta",
    "project_simplex",
    "residualize",
    "residualize_arrays",
    "simplex_least_squares",
    "solve_market_weights",
    "solve_time_weights",
    "solve_weights",
]

OBJECTIVE_TOL = 1e-12
MAX_ITER = 100_000


@dataclass
class ResidualizedBlock:
    """Rectangular pre-merger residual matrix plus the targets the weights match.

    Attributes
    ----------
    control_pre : ndarray (N_co, T_pre)
    treated_pre_mean : ndarray (T_pre,)
    control_post_mean : ndarray (N_co,)
    """

    control_pre: np.ndarray
    treated_pre_mean: np.ndarray
    control_post_mean: np.ndarray
    control_markets: list = field(default_factory=list)
    pre_quarters: list = field(default_factory=list)
    n_treated: int = 1
    n_post: int = 1
    coefficients: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.control_pre = np.atleast_2d(np.asarray(self.control_pre, dtype=float))
        self.treated_pre_mean = np.asarray(self.treated_pre_mean, dtype=float).reshape(-1)
        self.control_post_mean = np.asarray(self.control_post_mean, dtype=float).reshape(-1)
        n_co, t_pre = self.control_pre.shape
        if self.treated_pre_mean.size != t_pre or self.control_post_mean.size != n_co:
            raise PanelError("residualized block is not rectangular")
        if not (np.all(np.isfinite(self.control_pre)) and np.all(np.isfinite(self.treated_pre_mean))
                and np.all(np.isfinite(self.control_post_mean))):
            raise PanelError("residualized block has missing entries")
        if not self.control_markets:
            self.control_markets = [f"c{i}" for i in range(n_co)]
        if not self.pre_quarters:
            self.pre_quarters = list(range(t_pre))

    @property
    def n_control(self) -> int:
        return self.control_pre.shape[0]

    @property
    def t_pre(self) -> int:
        return self.control_pre.shape[1]


def residualize(data: PanelDataset, outcome: str = "price", mode: str = "covariates") -> ResidualizedBlock:
    """Residualise the outcome on ``[1, Z, W]`` by pooled OLS over control rows.

    Parameters
    ----------
    data : PanelDataset
        Every market must be observed in every pre-window quarter.
    outcome : str
        Column to residualise.
    mode : {"covariates", "raw"}
        ``"raw"`` skips the covariates and only removes the control mean.

    Raises
    ------
    PanelError
        On an unbalanced pre-merger block or a control market without
        post-merger observations.
    IdentificationError
        If the covariates are collinear on the control rows.
    """
    return residualize_arrays(
        data.arrays, data.outcome(outcome), list(data.plan.pre_quarters), list(data.plan.post_quarters), mode
    )


def residualize_arrays(
    arr: PanelArrays,
    y: np.ndarray,
    pre_quarters: list,
    post_quarters: list,
    mode: str = "covariates",
) -> ResidualizedBlock:
    """Array version of :func:`residualize` (used inside bootstrap replicates)."""
    if mode not in ("covariates", "raw"):
        raise ValueError("mode must be 'covariates' or 'raw'")
    y = np.asarray(y, dtype=float)
    control_row = ~arr.treated
    if not control_row.any() or control_row.all():
        raise PanelError("residualize needs both treated and control markets")
    n = arr.n_obs
    X = np.column_stack([np.ones(n), arr.Z, arr.W]) if mode == "covariates" else np.ones((n, 1))
    beta = ols(y[control_row], X[control_row])
    resid = y - X @ beta

    q0, t_pre = int(pre_quarters[0]), len(pre_quarters)
    M = arr.n_markets
    block = np.full((M, t_pre), np.nan)
    col = arr.quarter - q0
    in_pre = (col >= 0) & (col < t_pre)
    block[arr.market[in_pre], col[in_pre]] = resid[in_pre]
    if np.isnan(block).any():
        bad = [arr.market_ids[i] for i in np.flatnonzero(np.isnan(block).any(axis=1))[:5]]
        raise PanelError(f"unbalanced pre-merger block: markets missing pre-window quarters {bad}")
    in_post = (arr.quarter >= post_quarters[0]) & (arr.quarter <= post_quarters[-1])
    sums = np.bincount(arr.market[in_post], weights=resid[in_post], minlength=M)
    counts = np.bincount(arr.market[in_post], minlength=M)
    ctrl = np.flatnonzero(~arr.treated_market)
    trt = np.flatnonzero(arr.treated_market)
    if np.any(counts[ctrl] == 0):
        bad = [arr.market_ids[i] for i in ctrl[counts[ctrl] == 0][:5]]
        raise PanelError(f"control markets without post-merger observations: {bad}")
    n_post = int(np.unique(arr.quarter[in_post & arr.treated]).size)
    return ResidualizedBlock(
        control_pre=block[ctrl],
        treated_pre_mean=block[trt].mean(axis=0),
        control_post_mean=sums[ctrl] / counts[ctrl],
        control_markets=[arr.market_ids[i] for i in ctrl],
        pre_quarters=[int(q) for q in pre_quarters],
        n_treated=int(trt.size),
        n_post=max(n_post, 1),
        coefficients=beta,
    )


# ---------------------------------------------------------------- simplex QP
def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = 1}`` (sort-based, exact)."""
    v = np.asarray(v, dtype=float)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, n + 1)
    cond = u - css / ks > 0
    r = ks[cond][-1]
    theta = css[r - 1] / r
    return np.maximum(v - theta, 0.0)


@dataclass
class SimplexSolution:
    weights: np.ndarray
    intercept: float
    objective: float
    iterations: int
    gradient_mapping_norm: float
    certified: bool


def _kkt_polish(G: np.ndarray, c: np.ndarray, x: np.ndarray, tol: float):
    """Solve the equality-constrained problem on the support of ``x``; return it if KKT-optimal."""
    support = np.flatnonzero(x > 1e-12)
    for _ in range(x.size + 1):
        if support.size == 0:
            return None
        k = support.size
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = 2.0 * G[np.ix_(support, support)]
        K[:k, k] = -1.0
        K[k, :k] = 1.0
        rhs = np.concatenate([2.0 * c[support], [1.0]])
        if np.linalg.cond(K) > 1e12:
            return None
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            return None
        xs, mu = sol[:k], sol[k]
        if np.any(xs < -tol):
            support = support[xs > 0]
            continue
        cand = np.zeros_like(x)
        cand[support] = np.maximum(xs, 0.0)
        cand /= cand.sum()
        grad = 2.0 * (G @ cand - c)
        outside = np.setdiff1d(np.arange(x.size), support)
        if outside.size and np.any(grad[outside] < mu - tol):
            # Add the most violating coordinate and resolve.
            j = outside[np.argmin(grad[outside])]
            support = np.sort(np.append(support, j))
            continue
        return cand
    return None


def simplex_least_squares(
    A: np.ndarray,
    b: np.ndarray,
    ridge: float = 0.0,
    *,
    tol: float = OBJECTIVE_TOL,
    max_iter: int = MAX_ITER,
) -> SimplexSolution:
    """Minimise ``||w0 + A x - b||^2 + ridge ||x||^2`` over ``x`` in the simplex, ``w0`` free.

    Raises
    ------
    WeightSolverError
        If the iteration cap is reached without meeting the stopping rule or
        a KKT certificate; the message reports the final gradient-mapping norm.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    n = A.shape[1]
    Ac = A - A.mean(axis=0)
    bc = b - b.mean()
    G = Ac.T @ Ac + ridge * np.eye(n)
    c = Ac.T @ bc
    const = float(bc @ bc)

    def objective(x):
        return float(x @ G @ x - 2.0 * c @ x + const)

    lipschitz = 2.0 * float(np.linalg.eigvalsh(G)[-1]) if n else 0.0
    x = np.full(n, 1.0 / n)
    if n == 1 or lipschitz <= 0:
        f = objective(x)
        return SimplexSolution(x, float(b.mean() - A.mean(axis=0) @ x), max(f, 0.0), 0, 0.0, True)
    step = 1.0 / lipschitz
    scale = max(1.0, const, float(np.abs(G).max()))
    kkt_tol = 1e-11 * scale

    y, x_prev, t = x.copy(), x.copy(), 1.0
    f = objective(x)
    certified = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        x_new = project_simplex(y - step * 2.0 * (G @ y - c))
        f_new = objective(x_new)
        if f_new > f:
            # Adaptive restart: drop the momentum and take a plain projected step.
            y, t = x.copy(), 1.0
            x_new = project_simplex(x - step * 2.0 * (G @ x - c))
            f_new = objective(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        improvement = f - f_new
        x_prev, x, f, t = x, x_new, f_new, t_new
        if iterations % 25 == 0 or 0 <= improvement < tol:
            polished = _kkt_polish(G, c, x, kkt_tol)
            if polished is not None:
                fp = objective(polished)
                if fp < f - 1e-15 * scale:
                    x, f = polished, fp
                certified = True
                break
        if 0 <= improvement < tol and np.max(np.abs(x - x_prev)) < 1e-10:
            break
    else:
        grad_map = float(np.linalg.norm(x - project_simplex(x - step * 2.0 * (G @ x - c))) / step)
        raise WeightSolverError(
            f"simplex solver did not converge in {max_iter} iterations (gradient-mapping norm {grad_map:.3e})"
        )
    grad_map = float(np.linalg.norm(x - project_simplex(x - step * 2.0 * (G @ x - c))) / step)
    x = np.maximum(x, 0.0)
    x /= x.sum()
    intercept = float(b.mean() - A.mean(axis=0) @ x)
    return SimplexSolution(x, intercept, max(objective(x), 0.0), iterations, grad_map, certified)


# ----------------------------------------------------------------- weights
def auto_zeta(block: ResidualizedBlock, n_treated_post: int | None = None) -> float:
    """Default ridge level ``(N_tr * T_post)^(1/4) * sd(first differences of control pre residuals)``."""
    if block.t_pre < 2:
        raise PanelError("auto_zeta needs at least 2 pre-merger quarters")
    n_tp = block.n_treated * block.n_post if n_treated_post is None else n_treated_post
    diffs = np.diff(block.control_pre, axis=1).reshape(-1)
    if diffs.size < 2:
        return 0.0
    sd = float(np.std(diffs, ddof=1))
    if not sd > 1e-14 * max(1.0, float(np.abs(block.control_pre).max())):
        return 0.0
    return float(n_tp) ** 0.25 * sd


def solve_market_weights(block: ResidualizedBlock, zeta: float | str = "auto") -> tuple[np.ndarray, float, SimplexSolution]:
    """Control-market weights matching the treated pre-merger mean path.

    Minimises ``sum_t (omega0 + omega' Y_t - ybar_t)^2 + zeta^2 T_pre ||omega||^2``.
    """
    if block.n_control < 1 or block.t_pre < 2:
        raise PanelError("market weights need >= 1 control and >= 2 pre-merger quarters")
    z = auto_zeta(block) if zeta == "auto" else float(zeta)
    sol = simplex_least_squares(block.control_pre.T, block.treated_pre_mean, z * z * block.t_pre)
    return sol.weights, sol.intercept, sol


def solve_time_weights(block: ResidualizedBlock) -> tuple[np.ndarray, float, SimplexSolution]:
    """Pre-merger quarter weights matching control post-merger means (no ridge)."""
    if block.t_pre < 1:
        raise PanelError("time weights need >= 1 pre-merger quarter")
    sol = simplex_least_squares(block.control_pre, block.control_post_mean, 0.0)
    return sol.weights, sol.intercept, sol


@dataclass
class WeightSet:
    """Market weights over controls and time weights over pre-merger quarters."""

    market_weights: dict
    time_weights: dict
    intercepts: tuple
    fit_rmse: float
    zeta: float
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def uniform(cls, block: ResidualizedBlock) -> "WeightSet":
        om = np.full(block.n_control, 1.0 / block.n_control)
        ta = np.full(block.t_pre, 1.0 / block.t_pre)
        return cls._from(block, om, float(block.treated_pre_mean.mean() - block.control_pre.mean(axis=0).mean()),
                         ta, float(block.control_post_mean.mean() - block.control_pre.mean()), 0.0, {})

    @classmethod
    def _from(cls, block, omega, omega0, tau, tau0, zeta, diag):
        fit = omega0 + block.control_pre.T @ omega - block.treated_pre_mean
        return cls(
            market_weights=dict(zip(block.control_markets, map(float, omega))),
            time_weights=dict(zip((int(q) for q in block.pre_quarters), map(float, tau))),
            intercepts=(float(omega0), float(tau0)),
            fit_rmse=float(np.sqrt(np.mean(fit ** 2))),
            zeta=float(zeta),
            diagnostics=diag,
        )

    def omega(self, markets) -> np.ndarray:
        return np.array([self.market_weights[m] for m in markets])

    def tau(self, quarters) -> np.ndarray:
        return np.array([self.time_weights[q] for q in quarters])

    def to_dict(self) -> dict:
        return {
            "market_weights": self.market_weights,
            "time_weights": {str(k): v for k, v in self.time_weights.items()},
            "intercepts": {"omega0": self.intercepts[0], "tau0": self.intercepts[1]},
            "fit_rmse": self.fit_rmse,
            "zeta": self.zeta,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, path: str | Path) -> None:
        """Two-column audit file: ``unit`` rows for markets, then ``period`` rows for quarters."""
        lines = ["kind,id,weight"]
        lines += [f"market,{m},{w!r}" for m, w in sorted(self.market_weights.items())]
        lines += [f"quarter,{q},{w!r}" for q, w in sorted(self.time_weights.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def solve_weights(block: ResidualizedBlock, zeta: float | str = "auto") -> WeightSet:
    """Solve both weight problems on one residualised block."""
    z = auto_zeta(block) if zeta == "auto" else float(zeta)
    omega, omega0, s1 = solve_market_weights(block, z)
    tau, tau0, s2 = solve_time_weights(block)
    diag = {"market_iterations": s1.iterations, "time_iterations": s2.iterations,
            "market_gradient_mapping_norm": s1.gradient_mapping_norm,
            "time_gradient_mapping_norm": s2.gradient_mapping_norm}
    return WeightSet._from(block, omega, omega0, tau, tau0, z, diag)

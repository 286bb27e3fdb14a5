"""Shared numerical kernels: group sums, fixed-effect absorption, clustered sandwiches."""

from __future__ import annotations

import numpy as np

from .errors import IdentificationError

RANK_TOL = 1e-10


def group_codes(labels) -> tuple[np.ndarray, int]:
    """Map arbitrary labels to dense integer codes ``0..G-1`` (sorted label order)."""
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    codes = codes.reshape(-1)
    return codes, int(codes.max()) + 1 if codes.size else 0


def group_sum(values: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum rows of ``values`` (1-D or 2-D) within groups."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(codes, weights=values, minlength=n_groups)
    out = np.empty((n_groups, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(codes, weights=values[:, j], minlength=n_groups)
    return out


def demean_within(values: np.ndarray, codes: np.ndarray, n_groups: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Subtract (weighted) group means; groups with zero total weight are left at zero."""
    values = np.asarray(values, dtype=float)
    w = np.ones(values.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    total = np.bincount(codes, weights=w, minlength=n_groups)
    safe = np.where(total > 0, total, 1.0)
    wv = values * (w if values.ndim == 1 else w[:, None])
    means = group_sum(wv, codes, n_groups) / (safe if values.ndim == 1 else safe[:, None])
    return values - means[codes]


def demean_two_way(
    values: np.ndarray,
    unit_codes: np.ndarray,
    time_codes: np.ndarray,
    *,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Absorb unit and time fixed effects by alternating projections.

    Iterates until the largest change of any entry falls below ``tol`` (scaled
    by the data magnitude).  Exact after one sweep on balanced panels.
    """
    x = np.array(values, dtype=float, copy=True)
    n_units = int(unit_codes.max()) + 1
    n_times = int(time_codes.max()) + 1
    scale = max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    for _ in range(max_iter):
        prev = x
        x = demean_within(x, unit_codes, n_units)
        x = demean_within(x, time_codes, n_times)
        if np.max(np.abs(x - prev), initial=0.0) < tol * scale:
            return x
    raise IdentificationError("fixed-effect absorption did not converge")


def cluster_meat(scores: np.ndarray, clusters: np.ndarray) -> tuple[np.ndarray, int]:
    """Return ``sum_g s_g s_g'`` for per-row score vectors and the cluster count."""
    codes, n_groups = group_codes(clusters)
    sums = group_sum(scores, codes, n_groups)
    return sums.T @ sums, n_groups


def cr1_factor(n_obs: int, n_clusters: int, n_params: int) -> float:
    """Small-sample scaling ``G/(G-1) * (N-1)/(N-K)``."""
    if n_clusters < 2 or n_obs <= n_params:
        return float("nan")
    return n_clusters / (n_clusters - 1) * (n_obs - 1) / (n_obs - n_params)


def smallest_singular_ratio(matrix: np.ndarray) -> tuple[float, float]:
    """Smallest singular value and its ratio to the largest."""
    s = np.linalg.svd(np.atleast_2d(matrix), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0.0, 0.0
    return float(s[-1]), float(s[-1] / s[0])


def ols(y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Least-squares coefficients with an explicit rank check."""
    X = np.asarray(X, dtype=float)
    smin, ratio = smallest_singular_ratio(X)
    if X.shape[0] < X.shape[1] or ratio < RANK_TOL:
        raise IdentificationError(f"design matrix is rank deficient (smallest singular value {smin:.3e})")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)

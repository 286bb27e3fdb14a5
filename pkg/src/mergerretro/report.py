"""Estimation report container with JSON and plain-text renderings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import stats

__all__ = ["EstimateReport", "to_jsonable"]


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and non-finite floats into JSON-safe values."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "NaN"
        if math.isinf(v):
            return "Infinity" if v > 0 else "-Infinity"
        return v
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


@dataclass
class EstimateReport:
    """Named coefficients with a cluster-robust covariance matrix.

    ``se`` and ``pvalues`` are derived from ``vcov``; p-values use a Student t
    reference with ``n_clusters - 1`` degrees of freedom.
    """

    names: list
    coefficients: np.ndarray
    vcov: np.ndarray
    n_obs: int
    n_clusters: int
    cluster_level: str = "market"
    method: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(-1)
        self.vcov = np.asarray(self.vcov, dtype=float).reshape(len(self.names), len(self.names))
        if len(self.names) != self.coefficients.size:
            raise ValueError("names and coefficients differ in length")

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def pvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.coefficients / self.se
        df = max(self.n_clusters - 1, 1)
        return 2.0 * stats.t.sf(np.abs(t), df)

    def __getitem__(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def sub_vcov(self, names) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.vcov[np.ix_(idx, idx)]

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "method": self.method,
                "coefficients": dict(zip(self.names, self.coefficients)),
                "se": dict(zip(self.names, self.se)),
                "pvalues": dict(zip(self.names, self.pvalues)),
                "vcov": self.vcov,
                "names": list(self.names),
                "cluster_level": self.cluster_level,
                "n_obs": self.n_obs,
                "n_clusters": self.n_clusters,
                "diagnostics": self.diagnostics,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self, title: str | None = None) -> str:
        """Aligned text table: one row per coefficient with SE in parentheses."""
        width = max([len(n) for n in self.names] + [12])
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'':<{width}}  {'estimate':>12}  {'(se)':>12}  {'p-value':>8}")
        for n, b, s, p in zip(self.names, self.coefficients, self.se, self.pvalues):
            lines.append(f"{n:<{width}}  {b:>12.4f}  {'(' + format(s, '.4f') + ')':>12}  {p:>8.3f}")
        lines.append(f"{'Observations':<{width}}  {self.n_obs:>12d}")
        lines.append(f"{'Clusters':<{width}}  {self.n_clusters:>12d}  ({self.cluster_level})")
        return "\n".join(lines) + "\n"

"""Linear demand / conduct-augmented supply system and its identification algebra.

Demand and supply for market ``m`` in quarter ``t``::

    Q = alpha0 + alpha1 * P + alpha2' Z + phi
    P = theta0 + gamma * Q + theta2' W + theta3 * I + vartheta

with nuisance slope ``gamma = theta1 - lambda / alpha1`` mixing scale economies
``theta1`` and conduct ``lambda`` in [0, 1].  All functions here are pure and
accept numpy arrays wherever a scalar observation-level input is expected.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, NamedTuple

import numpy as np

from .errors import EquilibriumError, IdentificationError

__all__ = [
    "ConductParams",
    "ConductRecovery",
    "DemandParams",
    "ModelParams",
    "NuisanceSlopes",
    "Shocks",
    "SupplyParams",
    "delta_lambda",
    "equilibrium",
    "nuisance_slope",
    "observational_twin",
    "passthrough_price_effect",
    "recover_conduct_two_regimes",
    "reduced_form_price",
]

DENOMINATOR_TOL = 1e-6


@dataclass(frozen=True)
class DemandParams:
    alpha0: float
    alpha1: float
    alpha2: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha2", tuple(float(a) for a in np.atleast_1d(self.alpha2)))
        if not self.alpha1 < 0:
            raise ValueError(f"demand slope alpha1 must be negative, got {self.alpha1}")


@dataclass(frozen=True)
class SupplyParams:
    """Supply side; ``theta3`` is a scalar step or a tuple of quarterly increments."""

    theta0: float
    theta1: float
    theta2: tuple = ()
    theta3: float | tuple = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta2", tuple(float(a) for a in np.atleast_1d(self.theta2)))
        if np.ndim(self.theta3) > 0:
            object.__setattr__(self, "theta3", tuple(float(a) for a in self.theta3))
        else:
            object.__setattr__(self, "theta3", float(self.theta3))

    @property
    def quarterly(self) -> bool:
        return isinstance(self.theta3, tuple)

    def efficiency_path(self, steps: np.ndarray) -> np.ndarray:
        """Cumulative marginal-cost shift for markets ``steps`` quarters into the merger.

        Step 0 means pre-merger or control.  With quarterly increments the shift at
        step ``k`` is the sum of the first ``k`` increments (held at the last
        value beyond the profile); a scalar applies fully from step 1.
        """
        steps = np.asarray(steps, dtype=int)
        if not self.quarterly:
            return np.where(steps > 0, self.theta3, 0.0)
        cum = np.concatenate([[0.0], np.cumsum(self.theta3)])
        return cum[np.clip(steps, 0, len(self.theta3))]


@dataclass(frozen=True)
class ConductParams:
    lambda_ctrl: float
    lambda_pre: float
    lambda_post: float

    def __post_init__(self) -> None:
        for name in ("lambda_ctrl", "lambda_pre", "lambda_post"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


@dataclass(frozen=True)
class NuisanceSlopes:
    gamma_ctrl: float
    gamma_pre: float
    gamma_post: float


@dataclass(frozen=True)
class Shocks:
    phi: Any = 0.0
    vartheta: Any = 0.0


@dataclass(frozen=True)
class ModelParams:
    """Demand, supply and conduct parameters with JSON-friendly field names."""

    demand: DemandParams
    supply: SupplyParams
    conduct: ConductParams
    demand_slope_regime2: float | None = field(default=None)

    def slopes(self, alpha1: float | None = None) -> NuisanceSlopes:
        a1 = self.demand.alpha1 if alpha1 is None else alpha1
        th = self.supply.theta1
        c = self.conduct
        return NuisanceSlopes(
            nuisance_slope(th, c.lambda_ctrl, a1),
            nuisance_slope(th, c.lambda_pre, a1),
            nuisance_slope(th, c.lambda_post, a1),
        )

    def to_dict(self) -> dict:
        d = {**asdict(self.demand), **asdict(self.supply), **asdict(self.conduct)}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        if self.demand_slope_regime2 is not None:
            d["alpha1_regime2"] = self.demand_slope_regime2
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelParams":
        known = {"alpha0", "alpha1", "alpha2", "theta0", "theta1", "theta2", "theta3",
                 "lambda_ctrl", "lambda_pre", "lambda_post", "alpha1_regime2"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
        return cls(
            DemandParams(d["alpha0"], d["alpha1"], d.get("alpha2", ())),
            SupplyParams(d["theta0"], d["theta1"], d.get("theta2", ()), d.get("theta3", 0.0)),
            ConductParams(d["lambda_ctrl"], d["lambda_pre"], d["lambda_post"]),
            d.get("alpha1_regime2"),
        )


def nuisance_slope(theta1: float, lam: float, alpha1: float) -> float:
    """Composite supply slope ``theta1 - lambda / alpha1``."""
    if alpha1 == 0:
        raise ValueError("alpha1 must be non-zero")
    return theta1 - lam / alpha1


def _check_denominator(gamma, alpha1) -> np.ndarray:
    denom = 1.0 - np.asarray(gamma) * np.asarray(alpha1)
    if np.any(np.abs(denom) < DENOMINATOR_TOL):
        raise EquilibriumError("singular pass-through denominator: 1 - gamma*alpha1 is zero")
    return denom


def equilibrium(
    demand: DemandParams,
    supply: SupplyParams,
    gamma,
    Z,
    W,
    cost_shift=0.0,
    shocks: Shocks = Shocks(),
    alpha1=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised equilibrium ``(P, Q)``.

    ``Z`` and ``W`` are ``(n, p)`` / ``(n, q)`` arrays (or 1-D for one
    observation); ``cost_shift`` replaces ``theta3 * I``; ``alpha1`` overrides
    the demand slope per observation (demand regimes).
    """
    a1 = demand.alpha1 if alpha1 is None else np.asarray(alpha1, dtype=float)
    Z = np.asarray(Z, dtype=float)
    W = np.asarray(W, dtype=float)
    zterm = Z @ np.asarray(demand.alpha2) if len(demand.alpha2) else 0.0
    wterm = W @ np.asarray(supply.theta2) if len(supply.theta2) else 0.0
    denom = _check_denominator(gamma, a1)
    demand_level = demand.alpha0 + zterm + np.asarray(shocks.phi, dtype=float)
    cost = supply.theta0 + wterm + np.asarray(cost_shift, dtype=float) + np.asarray(shocks.vartheta, dtype=float)
    price = (cost + np.asarray(gamma) * demand_level) / denom
    quantity = demand_level + a1 * price
    return price, quantity


def reduced_form_price(
    demand: DemandParams,
    supply: SupplyParams,
    gamma: float,
    Z,
    W,
    I: int = 0,
    shocks: Shocks = Shocks(),
) -> float:
    """Equilibrium price ``[theta0 + gamma(alpha0 + alpha2'Z + phi) + theta2'W + theta3 I + vartheta] / (1 - gamma alpha1)``."""
    if supply.quarterly:
        raise ValueError("reduced_form_price takes a scalar theta3; use equilibrium() with a cost shift")
    price, _ = equilibrium(demand, supply, gamma, Z, W, supply.theta3 * I, shocks)
    return float(price)


def passthrough_price_effect(theta3: float, gamma: float, alpha1: float) -> float:
    """Equilibrium price response ``theta3 / (1 - gamma alpha1)`` to a cost shift."""
    return float(theta3 / _check_denominator(gamma, alpha1))


def delta_lambda(alpha1: float, gamma_pre: float, gamma_post: float) -> float:
    """Conduct change ``-alpha1 (gamma_post - gamma_pre)``."""
    return -alpha1 * (gamma_post - gamma_pre)


def observational_twin(params: tuple[float, float, float], kappa: float, alpha1: float) -> tuple[float, float, float]:
    """Shift ``(theta1, lambda_pre, lambda_post)`` along the unidentified direction.

    Returns ``(theta1 + kappa/alpha1, lambda_pre + kappa, lambda_post + kappa)``,
    which leaves both nuisance slopes unchanged.
    """
    if alpha1 == 0:
        raise ValueError("alpha1 must be non-zero")
    theta1, lam_pre, lam_post = params
    if kappa == 0:
        return (theta1, lam_pre, lam_post)
    return (theta1 + kappa / alpha1, lam_pre + kappa, lam_post + kappa)


class ConductRecovery(NamedTuple):
    theta1: float
    lambda_pre: float
    lambda_post: float


def recover_conduct_two_regimes(alpha1_1: float, alpha1_2: float, gammas) -> ConductRecovery:
    """Recover scale economies and both conduct levels from two demand-slope regimes.

    Parameters
    ----------
    alpha1_1, alpha1_2 : float
        Demand slopes in the two regimes (distinct, negative).
    gammas : sequence of 4 floats
        ``(gamma_pre^1, gamma_post^1, gamma_pre^2, gamma_post^2)``.

    Notes
    -----
    Conduct values are clamped to [0, 1].  The post-merger slopes of the
    second regime over-identify ``theta1``; a mismatch above 1e-8 triggers a
    ``RuntimeWarning``.
    """
    if alpha1_1 == alpha1_2:
        raise IdentificationError("two regimes need distinct demand slopes (rank condition fails)")
    if not (alpha1_1 < 0 and alpha1_2 < 0):
        raise ValueError("demand slopes must be negative")
    g0_1, g1_1, g0_2, g1_2 = (float(g) for g in gammas)
    spread = alpha1_1 - alpha1_2
    theta1 = (alpha1_1 * g0_1 - alpha1_2 * g0_2) / spread
    theta1_post = (alpha1_1 * g1_1 - alpha1_2 * g1_2) / spread
    if not math.isclose(theta1, theta1_post, rel_tol=0.0, abs_tol=1e-8):
        warnings.warn(
            f"second-regime slopes inconsistent: theta1 {theta1:.10g} (pre) vs {theta1_post:.10g} (post)",
            RuntimeWarning,
            stacklevel=2,
        )
    lam_pre = min(1.0, max(0.0, alpha1_1 * (theta1 - g0_1)))
    lam_post = min(1.0, max(0.0, alpha1_1 * (theta1 - g1_1)))
    return ConductRecovery(theta1, lam_pre, lam_post)

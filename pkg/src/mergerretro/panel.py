"""Market-by-quarter panel data model, CSV ingestion and treatment bookkeeping.

A panel is stored as a :class:`pandas.DataFrame` sorted by ``(market, quarter)``
with canonical column names::

    market, quarter, price, quantity, [seats], z_1..z_p, w_1..w_q, [x_1..x_r], treated

Quarters live on a dense integer axis.  The merger quarter is the *first*
post-merger quarter, so ``I_mt = 1`` iff market ``m`` is treated and
``t >= merger_quarter`` and a treated market is ``k = t - merger_quarter + 1``
quarters into the post-merger period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import PanelError

__all__ = [
    "PanelArrays",
    "PanelDataset",
    "PanelSchema",
    "TreatmentPlan",
    "load_panel",
    "treatment_indicator",
]


@dataclass(frozen=True)
class TreatmentPlan:
    """Merger timing and the set of treated markets.

    Parameters
    ----------
    merger_quarter : int
        First post-merger quarter on the dense quarter axis.
    treated_markets : frozenset of str
        Markets classified as treated.
    pre_window, post_window : int
        Number of quarters before / from the merger used by window-based steps.
    """

    merger_quarter: int
    treated_markets: frozenset = frozenset()
    pre_window: int = 8
    post_window: int = 8

    def __post_init__(self) -> None:
        if self.pre_window < 1 or self.post_window < 1:
            raise PanelError("pre_window and post_window must both be >= 1")
        object.__setattr__(self, "treated_markets", frozenset(str(m) for m in self.treated_markets))
        object.__setattr__(self, "merger_quarter", int(self.merger_quarter))

    @property
    def pre_quarters(self) -> range:
        return range(self.merger_quarter - self.pre_window, self.merger_quarter)

    @property
    def post_quarters(self) -> range:
        return range(self.merger_quarter, self.merger_quarter + self.post_window)

    def is_post(self, quarter: int) -> bool:
        return quarter >= self.merger_quarter

    def post_step(self, quarter: int) -> int:
        """Quarters since the merger, counting the merger quarter as step 1 (0 if pre)."""
        return max(0, quarter - self.merger_quarter + 1)

    def to_dict(self) -> dict:
        return {
            "merger_quarter": self.merger_quarter,
            "pre_window": self.pre_window,
            "post_window": self.post_window,
            "treated_markets": sorted(self.treated_markets),
        }


@dataclass(frozen=True)
class PanelSchema:
    """Mapping from canonical field names to CSV column names.

    ``demand_shifters``/``cost_shifters``/``controls`` of ``None`` mean
    auto-detection of ``z_*``, ``w_*`` and ``x_*`` columns respectively.
    """

    market: str = "market"
    quarter: str = "quarter"
    price: str = "price"
    quantity: str = "quantity"
    seats: str = "seats"
    treated: str = "treated"
    demand_shifters: tuple | None = None
    cost_shifters: tuple | None = None
    controls: tuple | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "PanelSchema":
        if mapping is None:
            return cls()
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise PanelError(f"unknown schema keys: {sorted(unknown)}")
        kwargs = dict(mapping)
        for key in ("demand_shifters", "cost_shifters", "controls"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class PanelArrays:
    """Dense numpy view of a panel, rows sorted by market code then quarter.

    Used by the estimators' inner loops and by the bootstrap, which builds
    resampled panels by stacking whole market blocks.
    """

    market: np.ndarray
    quarter: np.ndarray
    price: np.ndarray
    quantity: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    treated: np.ndarray
    merger_quarter: int
    market_ids: list
    treated_market: np.ndarray
    starts: np.ndarray = field(default=None)
    regime: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.starts is None:
            n_markets = len(self.market_ids)
            self.starts = np.searchsorted(self.market, np.arange(n_markets + 1))

    @property
    def n_obs(self) -> int:
        return self.market.shape[0]

    @property
    def n_markets(self) -> int:
        return len(self.market_ids)

    @property
    def post(self) -> np.ndarray:
        return self.quarter >= self.merger_quarter

    @property
    def indicator(self) -> np.ndarray:
        return self.treated & self.post

    def resample(self, market_codes: Sequence[int]) -> "PanelArrays":
        """Stack the full time series of ``market_codes`` (duplicates allowed) as new markets."""
        codes = np.asarray(market_codes, dtype=int)
        pieces = [np.arange(self.starts[c], self.starts[c + 1]) for c in codes]
        lengths = np.array([len(p) for p in pieces])
        rows = np.concatenate(pieces) if pieces else np.zeros(0, dtype=int)
        new_market = np.repeat(np.arange(len(codes)), lengths)
        ids = [f"{self.market_ids[c]}#{i}" for i, c in enumerate(codes)]
        return PanelArrays(
            market=new_market,
            quarter=self.quarter[rows],
            price=self.price[rows],
            quantity=self.quantity[rows],
            Z=self.Z[rows],
            W=self.W[rows],
            treated=self.treated[rows],
            merger_quarter=self.merger_quarter,
            market_ids=ids,
            treated_market=self.treated_market[codes],
            starts=np.concatenate([[0], np.cumsum(lengths)]),
            regime=None if self.regime is None else self.regime[rows],
        )


def _sorted_cols(columns: Iterable[str], prefix: str) -> list[str]:
    def key(c: str):
        tail = c[len(prefix):]
        return (0, int(tail)) if tail.isdigit() else (1, tail)

    return sorted((c for c in columns if c.startswith(prefix)), key=key)


class PanelDataset:
    """Validated market-by-quarter panel plus its treatment plan.

    Treat instances as read-only; derived views (``arrays``) are cached.
    """

    def __init__(
        self,
        frame: pd.DataFrame,
        plan: TreatmentPlan,
        metadata: Mapping[str, Any] | None = None,
        *,
        z_cols: Sequence[str] | None = None,
        w_cols: Sequence[str] | None = None,
        x_cols: Sequence[str] | None = None,
    ) -> None:
        frame = frame.copy()
        for col in ("market", "quarter", "price"):
            if col not in frame.columns:
                raise PanelError(f"missing column {col!r}")
        frame["market"] = frame["market"].astype(str)
        if (frame["market"].str.len() == 0).any():
            raise PanelError("market identifiers must be non-empty")
        frame["quarter"] = frame["quarter"].astype(int)
        frame = frame.sort_values(["market", "quarter"], kind="mergesort").reset_index(drop=True)

        dup = frame.duplicated(["market", "quarter"], keep="first")
        if dup.any():
            m, t = frame.loc[dup.idxmax(), ["market", "quarter"]]
            raise PanelError(f"duplicate (market, quarter) key ({m!r}, {t})")
        bad = np.flatnonzero(~(frame["price"].to_numpy(float) > 0))
        if bad.size:
            raise PanelError(f"non-positive price at sorted rows {bad[:10].tolist()}")
        if "quantity" in frame.columns:
            q = frame["quantity"].to_numpy(float)
            bad = np.flatnonzero(~np.isnan(q) & ~(q > 0))
            if bad.size:
                raise PanelError(f"non-positive quantity at sorted rows {bad[:10].tolist()}")

        self.z_cols = list(z_cols) if z_cols is not None else _sorted_cols(frame.columns, "z_")
        self.w_cols = list(w_cols) if w_cols is not None else _sorted_cols(frame.columns, "w_")
        self.x_cols = list(x_cols) if x_cols is not None else _sorted_cols(frame.columns, "x_")
        for col in self.z_cols + self.w_cols + self.x_cols:
            if col not in frame.columns:
                raise PanelError(f"missing column {col!r}")

        markets = set(frame["market"].unique())
        treated = set(plan.treated_markets)
        if "treated" in frame.columns:
            per_market = frame.groupby("market")["treated"].agg(["min", "max"])
            if (per_market["min"] != per_market["max"]).any():
                raise PanelError("treated flag varies within a market")
            flagged = set(per_market.index[per_market["max"].astype(int) == 1])
            if not treated:
                treated = flagged
            elif flagged != treated:
                raise PanelError("treated column disagrees with the treatment plan")
        unknown = treated - markets
        if unknown:
            raise PanelError(f"treated markets not in dataset: {sorted(unknown)[:5]}")
        plan = TreatmentPlan(plan.merger_quarter, frozenset(treated), plan.pre_window, plan.post_window)
        frame["treated"] = frame["market"].isin(treated).astype(int)

        qmin, qmax = int(frame["quarter"].min()), int(frame["quarter"].max())
        if treated and not (qmin < plan.merger_quarter <= qmax):
            raise PanelError(
                f"merger quarter {plan.merger_quarter} must lie inside the observed range ({qmin}, {qmax}]"
            )
        if treated:
            tr = frame[frame["treated"] == 1]
            post = tr["quarter"] >= plan.merger_quarter
            counts = post.groupby(tr["market"]).agg(["sum", "count"])
            lacking = counts.index[(counts["sum"] == 0) | (counts["sum"] == counts["count"])]
            if len(lacking):
                raise PanelError(
                    f"treated markets need >= 1 pre and >= 1 post observation: {list(lacking)[:5]}"
                )

        self.frame = frame
        self.plan = plan
        self.metadata: dict = dict(metadata or {})
        self._arrays: PanelArrays | None = None

    # ------------------------------------------------------------------ views
    @property
    def markets(self) -> list[str]:
        return sorted(self.frame["market"].unique())

    @property
    def treated_markets(self) -> list[str]:
        return sorted(self.plan.treated_markets)

    @property
    def control_markets(self) -> list[str]:
        return [m for m in self.markets if m not in self.plan.treated_markets]

    @property
    def quarters(self) -> np.ndarray:
        return np.sort(self.frame["quarter"].unique())

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def is_balanced(self) -> bool:
        return self.n_obs == len(self.markets) * len(self.quarters)

    def indicator(self) -> np.ndarray:
        """Vector of ``I_mt`` aligned with ``frame`` rows."""
        f = self.frame
        return ((f["treated"] == 1) & (f["quarter"] >= self.plan.merger_quarter)).to_numpy(int)

    def outcome(self, column: str, log: bool = False) -> np.ndarray:
        if column not in self.frame.columns:
            raise PanelError(f"missing outcome column {column!r}")
        y = self.frame[column].to_numpy(float)
        if log:
            if np.any(y <= 0):
                raise PanelError(f"log of non-positive {column!r}")
            y = np.log(y)
        return y

    @property
    def arrays(self) -> PanelArrays:
        if self._arrays is None:
            f = self.frame
            ids = self.markets
            code = pd.Categorical(f["market"], categories=ids).codes.astype(int)
            treated_market = np.array([m in self.plan.treated_markets for m in ids], dtype=bool)
            qty = f["quantity"].to_numpy(float) if "quantity" in f.columns else np.full(len(f), np.nan)
            self._arrays = PanelArrays(
                market=code,
                quarter=f["quarter"].to_numpy(int),
                price=f["price"].to_numpy(float),
                quantity=qty,
                Z=f[self.z_cols].to_numpy(float).reshape(len(f), len(self.z_cols)),
                W=f[self.w_cols].to_numpy(float).reshape(len(f), len(self.w_cols)),
                treated=f["treated"].to_numpy(int).astype(bool),
                merger_quarter=self.plan.merger_quarter,
                market_ids=ids,
                treated_market=treated_market,
                regime=f["regime"].to_numpy(int) if "regime" in f.columns else None,
            )
        return self._arrays

    # ------------------------------------------------------------- transforms
    def subset(self, rows: np.ndarray | pd.Series) -> "PanelDataset":
        frame = self.frame[np.asarray(rows, dtype=bool)]
        treated = self.plan.treated_markets & set(frame["market"])
        plan = TreatmentPlan(self.plan.merger_quarter, treated, self.plan.pre_window, self.plan.post_window)
        return PanelDataset(frame, plan, self.metadata, z_cols=self.z_cols, w_cols=self.w_cols, x_cols=self.x_cols)

    def restrict_to_window(self) -> "PanelDataset":
        q = self.frame["quarter"]
        lo = self.plan.merger_quarter - self.plan.pre_window
        hi = self.plan.merger_quarter + self.plan.post_window
        return self.subset((q >= lo) & (q < hi))

    def with_frame(self, frame: pd.DataFrame, **metadata: Any) -> "PanelDataset":
        return PanelDataset(
            frame, self.plan, {**self.metadata, **metadata}, z_cols=self.z_cols, w_cols=self.w_cols, x_cols=self.x_cols
        )

    def to_csv(self, path: str | Path) -> None:
        """Write the panel in the canonical CSV schema (``repr``-exact floats)."""
        cols = ["market", "quarter", "price", "quantity"]
        if "seats" in self.frame.columns:
            cols.append("seats")
        cols += self.z_cols + self.w_cols + self.x_cols
        if "regime" in self.frame.columns:
            cols.append("regime")
        cols.append("treated")
        self.frame[cols].to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    def equals(self, other: "PanelDataset") -> bool:
        if self.plan != other.plan or list(self.frame.columns) != list(other.frame.columns):
            return False
        return self.frame.equals(other.frame)

    def __repr__(self) -> str:
        return (
            f"PanelDataset(n_obs={self.n_obs}, markets={len(self.markets)}, "
            f"treated={len(self.plan.treated_markets)}, merger_quarter={self.plan.merger_quarter})"
        )


def load_panel(
    path: str | Path,
    schema: PanelSchema | Mapping[str, Any] | None = None,
    *,
    merger_quarter: int,
    pre_window: int = 8,
    post_window: int = 8,
    metadata: Mapping[str, Any] | None = None,
) -> PanelDataset:
    """Read a panel CSV and validate it.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : PanelSchema or mapping, optional
        Column mapping; defaults to the canonical names.
    merger_quarter : int
        First post-merger quarter.

    Raises
    ------
    PanelError
        On a missing column, a duplicated ``(market, quarter)`` key, an
        unparseable number or a non-positive price.  Row numbers in messages
        are 1-based data rows (the header is not counted).
    """
    schema = schema if isinstance(schema, PanelSchema) else PanelSchema.from_mapping(schema)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")

    def require(col: str) -> None:
        if col not in raw.columns:
            raise PanelError(f"missing column {col!r} in {path}")

    for col in (schema.market, schema.quarter, schema.price, schema.quantity):
        require(col)
    z_src = list(schema.demand_shifters) if schema.demand_shifters is not None else _sorted_cols(raw.columns, "z_")
    w_src = list(schema.cost_shifters) if schema.cost_shifters is not None else _sorted_cols(raw.columns, "w_")
    x_src = list(schema.controls) if schema.controls is not None else _sorted_cols(raw.columns, "x_")
    for col in z_src + w_src + x_src:
        require(col)

    def numeric(col: str, allow_blank: bool = False) -> np.ndarray:
        out = np.empty(len(raw))
        for i, text in enumerate(raw[col]):
            text = text.strip()
            if text == "" and allow_blank:
                out[i] = math.nan
                continue
            try:
                out[i] = float(text)
            except ValueError:
                raise PanelError(f"row {i + 1}: column {col!r} is not numeric: {text!r}") from None
        return out

    frame = pd.DataFrame({"market": raw[schema.market].str.strip()})
    quarter = numeric(schema.quarter)
    if np.any(quarter != np.round(quarter)):
        raise PanelError("quarter column must hold integers")
    frame["quarter"] = quarter.astype(int)
    frame["price"] = numeric(schema.price)
    frame["quantity"] = numeric(schema.quantity, allow_blank=True)
    if schema.seats in raw.columns:
        frame["seats"] = numeric(schema.seats, allow_blank=True)
    z_cols = [f"z_{i + 1}" for i in range(len(z_src))]
    w_cols = [f"w_{i + 1}" for i in range(len(w_src))]
    x_cols = [f"x_{i + 1}" for i in range(len(x_src))]
    for dst, src in zip(z_cols + w_cols + x_cols, z_src + w_src + x_src):
        frame[dst] = numeric(src)
    if "regime" in raw.columns:
        frame["regime"] = numeric("regime").astype(int)
    if schema.treated in raw.columns:
        flag = numeric(schema.treated)
        if not np.isin(flag, (0.0, 1.0)).all():
            raise PanelError("treated column must be 0/1")
        frame["treated"] = flag.astype(int)

    empty = np.flatnonzero(frame["market"].str.len().to_numpy() == 0)
    if empty.size:
        raise PanelError(f"empty market identifier at rows {(empty + 1).tolist()}")
    dup = frame.duplicated(["market", "quarter"], keep="first").to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise PanelError(
            f"row {i + 1}: duplicate (market, quarter) key ({frame.at[i, 'market']!r}, {frame.at[i, 'quarter']})"
        )
    bad = np.flatnonzero(~(frame["price"].to_numpy() > 0))
    if bad.size:
        raise PanelError(f"non-positive price at rows {(bad + 1).tolist()}")
    q = frame["quantity"].to_numpy()
    bad = np.flatnonzero(~np.isnan(q) & ~(q > 0))
    if bad.size:
        raise PanelError(f"non-positive quantity at rows {(bad + 1).tolist()}")

    treated = frozenset(frame.loc[frame["treated"] == 1, "market"]) if "treated" in frame.columns else frozenset()
    plan = TreatmentPlan(merger_quarter, treated, pre_window, post_window)
    meta = {"source": str(path), **(metadata or {})}
    return PanelDataset(frame, plan, meta, z_cols=z_cols, w_cols=w_cols, x_cols=x_cols)


def treatment_indicator(dataset: PanelDataset, m: str, t: int) -> int:
    """Return ``Treated_m * PostMerger_mt`` for an observed ``(m, t)``."""
    f = dataset.frame
    hit = (f["market"] == str(m)) & (f["quarter"] == int(t))
    if not hit.any():
        raise PanelError(f"unknown observation ({m!r}, {t})")
    return int(str(m) in dataset.plan.treated_markets and int(t) >= dataset.plan.merger_quarter)

"""Treated / control / excluded labelling of markets from carrier presence data."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import pandas as pd

from .errors import PanelError

__all__ = [
    "CONNECTING_PRESENCE_SHARE",
    "CarrierPresence",
    "MarketLabel",
    "NONSTOP_MIN_OPS",
    "OVERLAP_JOINT_SHARE",
    "OVERLAP_PARTY_SHARE",
    "classify_markets",
    "load_presence",
]

#: Quarterly nonstop operations (five round trips) for a carrier to count as nonstop.
NONSTOP_MIN_OPS = 10
#: Share of a carrier's market passengers flown via connections that counts as substantial.
CONNECTING_PRESENCE_SHARE = 0.10
#: Minimum passenger share of each merging party for a connecting overlap.
OVERLAP_PARTY_SHARE = 0.10
#: Minimum joint passenger share of the merging parties for a connecting overlap.
OVERLAP_JOINT_SHARE = 0.40


class MarketLabel(str, enum.Enum):
    TREATED = "Treated"
    CONTROL = "Control"
    EXCLUDED = "Excluded"


@dataclass(frozen=True)
class CarrierPresence:
    """One carrier's pre-merger footprint in one market."""

    market: str
    carrier: str
    nonstop_ops_per_quarter: float
    passenger_share: float
    connect_share: float

    def __post_init__(self) -> None:
        if not str(self.market):
            raise PanelError("empty market identifier in presence table")
        if self.nonstop_ops_per_quarter < 0:
            raise PanelError(f"negative nonstop operations for {self.carrier} in {self.market}")
        for name in ("passenger_share", "connect_share"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise PanelError(f"{name}={value} outside [0, 1] for {self.carrier} in {self.market}")

    @property
    def is_nonstop(self) -> bool:
        return self.nonstop_ops_per_quarter >= NONSTOP_MIN_OPS

    @property
    def is_present(self) -> bool:
        return self.nonstop_ops_per_quarter > 0 or self.passenger_share > 0


def _aggregate(records: list[CarrierPresence]) -> dict[str, dict[str, CarrierPresence]]:
    """Average repeated (market, carrier) rows, e.g. one row per pre-merger quarter."""
    frame = pd.DataFrame([vars(r) for r in records])
    grouped = frame.groupby(["market", "carrier"], sort=True).mean(numeric_only=True)
    out: dict[str, dict[str, CarrierPresence]] = {}
    for (market, carrier), row in grouped.iterrows():
        out.setdefault(market, {})[carrier] = CarrierPresence(
            market, carrier, float(row["nonstop_ops_per_quarter"]),
            float(row["passenger_share"]), float(row["connect_share"]),
        )
    return out


def _label(carriers: Mapping[str, CarrierPresence], merging: tuple[str, str]) -> MarketLabel:
    a, b = (carriers.get(c) for c in merging)
    present = [p for p in (a, b) if p is not None and p.is_present]

    if any(p.connect_share >= CONNECTING_PRESENCE_SHARE for p in present):
        return MarketLabel.EXCLUDED
    both_nonstop = a is not None and b is not None and a.is_nonstop and b.is_nonstop
    if len(present) == 2:
        joint = a.passenger_share + b.passenger_share
        if (
            a.passenger_share >= OVERLAP_PARTY_SHARE
            and b.passenger_share >= OVERLAP_PARTY_SHARE
            and joint >= OVERLAP_JOINT_SHARE
        ):
            return MarketLabel.EXCLUDED
    if both_nonstop:
        return MarketLabel.TREATED
    if len(present) <= 1:
        # A lone merging carrier keeps its operations, so the nonstop count is unchanged.
        return MarketLabel.CONTROL
    return MarketLabel.EXCLUDED


def classify_markets(
    presence: Iterable[CarrierPresence] | pd.DataFrame,
    merging: tuple[str, str],
) -> dict[str, MarketLabel]:
    """Label every market as treated, control or excluded.

    Parameters
    ----------
    presence : iterable of CarrierPresence or DataFrame
        Pre-merger carrier footprints.  Repeated ``(market, carrier)`` rows are
        averaged, so a per-quarter table covering the whole pre-merger window
        can be passed directly.
    merging : pair of str
        Carrier codes of the merging parties.

    Returns
    -------
    dict
        Market id to :class:`MarketLabel`, covering every market in ``presence``.

    Raises
    ------
    PanelError
        If the table is empty or a merging carrier code never appears in it.
    """
    if isinstance(presence, pd.DataFrame):
        records = _records_from_frame(presence)
    else:
        records = list(presence)
    if not records:
        raise PanelError("empty presence table")
    if len(merging) != 2 or merging[0] == merging[1]:
        raise PanelError("merging must name two distinct carriers")
    known = {r.carrier for r in records}
    unknown = [c for c in merging if c not in known]
    if unknown:
        raise PanelError(f"unknown carrier code(s): {unknown}")
    table = _aggregate(records)
    return {m: _label(table[m], tuple(merging)) for m in sorted(table)}


def _records_from_frame(frame: pd.DataFrame) -> list[CarrierPresence]:
    rename = {"nonstop_ops": "nonstop_ops_per_quarter", "pax_share": "passenger_share"}
    frame = frame.rename(columns=rename)
    needed = ["market", "carrier", "nonstop_ops_per_quarter", "passenger_share", "connect_share"]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise PanelError(f"presence table missing columns {missing}")
    return [
        CarrierPresence(str(r.market), str(r.carrier), float(r.nonstop_ops_per_quarter),
                        float(r.passenger_share), float(r.connect_share))
        for r in frame[needed].itertuples(index=False)
    ]


def load_presence(path: str | Path) -> list[CarrierPresence]:
    """Read ``market, carrier, nonstop_ops, pax_share, connect_share`` CSV rows."""
    frame = pd.read_csv(path, dtype={"market": str, "carrier": str}, encoding="utf-8")
    return _records_from_frame(frame)

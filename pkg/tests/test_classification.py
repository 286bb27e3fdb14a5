import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergerretro.classification import CarrierPresence, MarketLabel, classify_markets, load_presence
from mergerretro.errors import PanelError

MERGING = ("AA", "US")


def presence(market, carrier, ops, share, connect=0.0):
    return CarrierPresence(market, carrier, ops, share, connect)


def test_both_nonstop_without_connecting_presence_is_treated():
    rows = [presence("X", "AA", 12, 0.2), presence("X", "US", 12, 0.15), presence("X", "DL", 30, 0.65)]
    assert classify_markets(rows, MERGING) == {"X": MarketLabel.TREATED}


def test_connecting_overlap_is_excluded():
    rows = [presence("X", "AA", 12, 0.15), presence("X", "US", 12, 0.30), presence("X", "DL", 30, 0.55)]
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.EXCLUDED


def test_overlap_thresholds_are_inclusive():
    rows = [presence("X", "AA", 0, 0.10), presence("X", "US", 0, 0.30), presence("X", "DL", 30, 0.60)]
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.EXCLUDED
    rows[0] = presence("X", "AA", 0, 0.0999)
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.EXCLUDED  # two present, not both nonstop
    rows = [presence("Y", "AA", 20, 0.0999), presence("Y", "US", 20, 0.35)]
    assert classify_markets(rows, MERGING)["Y"] is MarketLabel.TREATED


def test_substantial_connecting_presence_is_excluded():
    rows = [presence("X", "AA", 12, 0.05, connect=0.10), presence("X", "US", 12, 0.05)]
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.EXCLUDED
    rows += [presence("Y", "AA", 12, 0.3, connect=0.25), presence("Y", "DL", 12, 0.7)]
    assert classify_markets(rows, MERGING)["Y"] is MarketLabel.EXCLUDED


def test_single_merging_carrier_is_control():
    rows = [presence("X", "AA", 40, 0.4), presence("X", "DL", 30, 0.3), presence("X", "UA", 30, 0.3),
            presence("Y", "DL", 30, 0.5), presence("Y", "UA", 30, 0.5), presence("Z", "US", 1, 0.0)]
    labels = classify_markets(rows, MERGING)
    assert all(labels[m] is MarketLabel.CONTROL for m in "XYZ")


def test_nonstop_threshold_is_ten_operations():
    rows = [presence("X", "AA", 10, 0.1), presence("X", "US", 10, 0.1), presence("X", "DL", 10, 0.8)]
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.TREATED
    rows[0] = presence("X", "AA", 9, 0.1)
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.EXCLUDED


def test_repeated_rows_are_averaged():
    rows = [presence("X", "AA", 6, 0.1), presence("X", "AA", 16, 0.1), presence("X", "US", 12, 0.1)]
    assert classify_markets(rows, MERGING)["X"] is MarketLabel.TREATED


def test_errors():
    with pytest.raises(PanelError, match="empty"):
        classify_markets([], MERGING)
    with pytest.raises(PanelError, match="unknown carrier"):
        classify_markets([presence("X", "AA", 12, 0.2)], MERGING)
    with pytest.raises(PanelError, match="distinct"):
        classify_markets([presence("X", "AA", 12, 0.2)], ("AA", "AA"))
    with pytest.raises(PanelError, match="outside"):
        presence("X", "AA", 12, 1.2)


def test_load_presence_csv(tmp_path):
    path = tmp_path / "presence.csv"
    path.write_text("market,carrier,nonstop_ops,pax_share,connect_share\n"
                    "001,AA,12,0.2,0\n001,US,12,0.1,0\n002,DL,40,1,0\n002,US,0,0,0\n", encoding="utf-8")
    labels = classify_markets(load_presence(path), MERGING)
    assert labels == {"001": MarketLabel.TREATED, "002": MarketLabel.CONTROL}


def test_dataframe_input():
    frame = pd.DataFrame({"market": ["X", "X"], "carrier": ["AA", "US"], "nonstop_ops": [12, 12],
                          "pax_share": [0.2, 0.1], "connect_share": [0.0, 0.0]})
    assert classify_markets(frame, MERGING) == {"X": MarketLabel.TREATED}


carrier_row = st.tuples(
    st.sampled_from(["M1", "M2", "M3", "M4"]),
    st.sampled_from(["AA", "US", "DL", "UA"]),
    st.integers(0, 30),
    st.floats(0, 1),
    st.floats(0, 1),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(carrier_row, min_size=1, max_size=16))
def test_classification_is_a_partition(rows):
    records = [presence(*r) for r in rows] + [presence("M1", "AA", 0, 0.0), presence("M1", "US", 0, 0.0)]
    labels = classify_markets(records, MERGING)
    assert set(labels) == {r.market for r in records}
    assert all(isinstance(v, MarketLabel) for v in labels.values())

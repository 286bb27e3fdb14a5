import numpy as np
import pandas as pd
import pytest

from mergerretro.panel import PanelDataset, TreatmentPlan
from mergerretro.simulator import DgpConfig, simulate_panel


def grid_panel(outcome, treated, merger_quarter, *, z=None, w=None, quantity=None):
    """Balanced panel from an ``(n_markets, n_quarters)`` outcome array.

    Markets are named ``m00, m01, ...``; ``treated`` lists market indices.
    """
    outcome = np.asarray(outcome, dtype=float)
    n_markets, n_quarters = outcome.shape
    ids = [f"m{i:02d}" for i in range(n_markets)]
    frame = pd.DataFrame({
        "market": np.repeat(ids, n_quarters),
        "quarter": np.tile(np.arange(n_quarters), n_markets),
        "price": outcome.reshape(-1),
    })
    frame["quantity"] = 1.0 if quantity is None else np.asarray(quantity, dtype=float).reshape(-1)
    for name, block in (("z", z), ("w", w)):
        if block is not None:
            block = np.asarray(block, dtype=float).reshape(n_markets * n_quarters, -1)
            for j in range(block.shape[1]):
                frame[f"{name}_{j + 1}"] = block[:, j]
    plan = TreatmentPlan(merger_quarter, frozenset(ids[i] for i in treated),
                         pre_window=merger_quarter, post_window=n_quarters - merger_quarter)
    return PanelDataset(frame, plan)


def noiseless_config(**overrides) -> DgpConfig:
    base = dict(sigma_phi=0.0, sigma_vartheta=0.0, sigma_intercept_phi=0.0, sigma_intercept_vartheta=0.0)
    base.update(overrides)
    return DgpConfig(**base)


@pytest.fixture(scope="session")
def sim_panel():
    return simulate_panel(DgpConfig(seed=3))


@pytest.fixture(scope="session")
def small_panel():
    return simulate_panel(DgpConfig(n_treated=6, n_control=18, T_pre=4, T_post=4, seed=5))


# ------------------------------------------------- acceptance criteria report
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")

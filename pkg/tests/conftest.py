import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from statefolio.panel import Panel
from statefolio.synth import SynthSpec, generate_panel

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def month_panel(rets_by_month: dict, caps=None, features=None, state=None) -> Panel:
    """Panel from ``{yyyymm: [returns]}``; stock ids are s0, s1, ... within each month."""
    sid, mon, ret = [], [], []
    for m, rs in rets_by_month.items():
        for i, r in enumerate(rs):
            sid.append(f"s{i}")
            mon.append(m)
            ret.append(r)
    return Panel(sid, mon, ret, caps, features, None, state)


@pytest.fixture(scope="session")
def small_synth():
    """600 stocks x 36 months with the default signal design."""
    return generate_panel(SynthSpec(n_stocks=600, n_months=36, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

from sctcheck.corpus import get_case  # noqa: E402
from sctcheck.machine import initial_config  # noqa: E402


@pytest.fixture
def case():
    return get_case


@pytest.fixture
def v1_cfg():
    c = get_case("spectre-v1")
    return initial_config(c.program)


@pytest.fixture
def alias_cfg():
    c = get_case("aliasing-predictor")
    return initial_config(c.program)


# ---------------------------------------------------------------- acceptance report

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    ok = rep.passed and _criteria.get(n, (True,))[0]
    _criteria[n] = (ok, title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, title = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")

from __future__ import annotations

import pytest

_DETAILS: dict[str, list[str]] = {}
_OUTCOMES: dict[int, list[tuple[str, bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def note(request):
    """Attach a detail line to the acceptance summary for this test."""
    lines = _DETAILS.setdefault(request.node.nodeid, [])
    return lines.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _OUTCOMES.setdefault(mark.args[0], []).append((item.nodeid, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        runs = _OUTCOMES[n]
        ok = all(p for _, p in runs)
        details = "; ".join(d for nodeid, _ in runs for d in _DETAILS.get(nodeid, []))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {details}")

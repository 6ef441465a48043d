import re

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


def _number(nodeid: str):
    m = re.search(r"test_criterion_(\d+)", nodeid)
    return int(m.group(1)) if m else None


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns ``passed``."""
    results = request.config.stash[_RESULTS]

    def record(passed: bool, detail: str) -> bool:
        n = _number(request.node.nodeid)
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        results[n] = line
        print(line)
        return passed

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    n = _number(item.nodeid)
    if n is not None and report.when == "call" and report.failed:
        results = item.config.stash[_RESULTS]
        if n not in results:
            results[n] = f"criterion {n:>2}: FAIL  raised {call.excinfo.typename}: {call.excinfo.value}"


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

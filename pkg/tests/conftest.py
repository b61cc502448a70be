"""Session-wide hooks: feasibility auditing of every attack result and the criterion summary."""

import numpy as np
import pytest

from segrobust import attack

FEASIBILITY_TEST = "test_criterion_5_feasibility"


class FeasibilityAudit:
    """Checks every emitted attack result against its own radius and the [0, 1] box."""

    def __init__(self):
        self.checked = 0
        self.violations = []

    def __call__(self, result):
        self.checked += 1
        delta = np.abs(result.adversarial - result.original).max(initial=0.0)
        lo, hi = result.adversarial.min(initial=0.0), result.adversarial.max(initial=0.0)
        if delta > result.epsilon or lo < 0.0 or hi > 1.0:
            self.violations.append((result.image_id, result.loss, result.epsilon, delta, lo, hi))


AUDIT = FeasibilityAudit()
CRITERIA = {}  # criterion number -> (status, detail)
CRITERIA_MARKERS = {}  # node id -> criterion number


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    attack.add_result_observer(AUDIT)


def pytest_collection_modifyitems(session, config, items):
    # the exhaustive feasibility check must see every other test's results
    last = [it for it in items if it.name == FEASIBILITY_TEST]
    items[:] = [it for it in items if it.name != FEASIBILITY_TEST] + last


def pytest_runtest_logreport(report):
    marker = CRITERIA_MARKERS.get(report.nodeid)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        CRITERIA[marker] = ("PASS" if report.passed else "FAIL", detail)


def pytest_itemcollected(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        CRITERIA_MARKERS[item.nodeid] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n}: {status}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def audit():
    return AUDIT

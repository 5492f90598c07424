"""Shared fixtures plus the acceptance summary block.

Acceptance tests record one line each through the `record` fixture; the
terminal summary prints every recorded line so a full run ends with a
criterion-by-criterion PASS/FAIL table, including measured values and the
tolerance they were held to.
"""

import pytest


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def record(request):
    """record(num, label, passed, detail): one summary line per criterion."""
    lines = request.config._acceptance_lines

    def _record(num, label, passed, detail):
        mark = "PASS" if passed else "FAIL"
        lines[num] = f"[{mark}] {num:02d} {label}: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, 13):
        if num in lines:
            terminalreporter.write_line(lines[num])
        else:
            terminalreporter.write_line(f"[MISSING] {num:02d} (not run)")

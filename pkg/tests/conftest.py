"""Shared pytest wiring: collects acceptance-criterion verdict lines and
prints them after the run, outside of output capture."""

import pytest

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log() -> list[str]:
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in _acceptance_lines:
        terminalreporter.write_line(line)

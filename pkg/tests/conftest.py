"""Shared test plumbing.

Collects the acceptance verdict lines emitted by tests/test_acceptance.py
and echoes them in the terminal summary, so a plain ``pytest -v`` run shows
one pass/fail line per criterion even though pytest captures stdout of
passing tests.
"""

verdict_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if verdict_lines:
        terminalreporter.section("acceptance criteria")
        for line in verdict_lines:
            terminalreporter.write_line(line)

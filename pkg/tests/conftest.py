import os
import sys

# make the oracle module importable as a plain module
sys.path.insert(0, os.path.dirname(__file__))

# acceptance checks append "PASS/FAIL criterion N: ..." lines here
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

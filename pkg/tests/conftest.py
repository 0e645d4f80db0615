"""Shared pytest wiring: surfaces acceptance verdicts in the terminal summary.

Capture runs at the file-descriptor level by default, so lines printed by the
acceptance tests would vanish on success; collecting them here and emitting a
summary section keeps one visible PASS/FAIL line per criterion in every run.
"""

_verdicts: list[str] = []


def record_verdict(line: str) -> None:
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)

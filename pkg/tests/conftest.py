"""Collects acceptance verdicts and prints them after the run."""

VERDICTS: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        status, title, note = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  ({note})" if note else ""))

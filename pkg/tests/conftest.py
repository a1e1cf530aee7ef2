"""Shared pytest plumbing.

The acceptance tests register one verdict per criterion; the hook below
prints them as a block at the end of the run so the pass/fail status of
every criterion is visible in one place regardless of output capture.
"""

_VERDICTS = []


def record_verdict(num: int, name: str, ok: bool, detail: str) -> bool:
    _VERDICTS.append((num, f"criterion {num:02d} {name}: "
                           f"{'PASS' if ok else 'FAIL'} ({detail})"))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)

"""Acceptance-criterion bookkeeping: one pass/fail line per criterion."""

import time
from contextlib import contextmanager

_RESULTS: dict[int, dict] = {}


@contextmanager
def criterion(num: int, description: str):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        _RESULTS[num] = {
            "description": description,
            "passed": False,
            "elapsed": time.monotonic() - start,
        }
        raise
    _RESULTS[num] = {
        "description": description,
        "passed": True,
        "elapsed": time.monotonic() - start,
    }


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        entry = _RESULTS[num]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {num:>2}: {status}  ({entry['elapsed']:6.2f}s)  "
            f"{entry['description']}"
        )

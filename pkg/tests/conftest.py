import contextlib
import time

import pytest

CRITERIA = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title):`` records PASS/FAIL and elapsed time for one acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        t0 = time.perf_counter()
        CRITERIA[number] = (title, "FAIL", 0.0, "")
        try:
            yield CRITERIA
        except BaseException as exc:
            CRITERIA[number] = (title, "FAIL", time.perf_counter() - t0, str(exc).splitlines()[0] if str(exc) else "")
            raise
        note = CRITERIA.get(("note", number), "")
        CRITERIA[number] = (title, "PASS", time.perf_counter() - t0, note)

    return record


def pytest_terminal_summary(terminalreporter):
    numbers = sorted(k for k in CRITERIA if isinstance(k, int))
    if not numbers:
        return
    terminalreporter.section("acceptance criteria")
    for n in numbers:
        title, status, seconds, note = CRITERIA[n]
        line = f"criterion {n:2d} {status}  {title}  ({seconds:.1f} s)"
        if note:
            line += f"  [{note}]"
        terminalreporter.write_line(line)

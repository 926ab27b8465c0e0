import time

import pytest

ACCEPTANCE: dict[int, str] = {}
SESSION_START = [time.perf_counter()]


def pytest_sessionstart(session):
    SESSION_START[0] = time.perf_counter()


def pytest_collection_modifyitems(items):
    # acceptance criteria run last so the runtime criterion sees the whole suite
    items.sort(key=lambda it: "test_acceptance" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one line and fails the test if not ok."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        assert ok, line
    return record


@pytest.fixture
def session_elapsed():
    return lambda: time.perf_counter() - SESSION_START[0]

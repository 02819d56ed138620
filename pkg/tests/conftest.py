import contextlib
import time

import pytest

_VERDICTS = []


@pytest.fixture
def criterion(capsys):
    """Context manager printing one PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def check(number, title):
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"[{status}] criterion {number:>2}: {title} ({time.perf_counter() - start:.1f}s)"
            _VERDICTS.append(line)
            with capsys.disabled():
                print("\n" + line, flush=True)

    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)

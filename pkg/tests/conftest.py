"""Collects the acceptance verdicts and prints them in the terminal summary."""

import pytest

N_CRITERIA = 10
VERDICTS: dict[int, tuple[bool, str]] = {}
_used = []


@pytest.fixture
def verdict():
    _used.append(True)

    def record(n: int, ok: bool, detail: str) -> None:
        VERDICTS[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _used:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in VERDICTS:
            terminalreporter.write_line(f"criterion {n:2d}: NO VERDICT  (deselected, or errored before deciding)")
            continue
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

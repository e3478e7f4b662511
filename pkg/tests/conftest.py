"""Shared hooks: the acceptance suite's one-line-per-criterion summary."""
import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the summary line of criterion ``n``."""
    def record(n: int, ok: bool, detail: str) -> None:
        _LINES[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_LINES[n])
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n = mark.args[0]
    if rep.failed and (n not in _LINES or " PASS " in _LINES[n]):
        # crashed before recording, or an assertion beyond the summarized checks
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        _LINES[n] = f"criterion {n:>2}: FAIL  {msg[:160]}"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])

import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains desk models on the synthetic benchmark (minutes)")


@pytest.fixture
def record():
    """``record(n, name, ok, detail)`` stores one acceptance line; the test should still assert ``ok``."""

    def _record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        _RESULTS[n] = (name, bool(ok), detail)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        name, ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
    passed = sum(ok for _, ok, _ in _RESULTS.values())
    terminalreporter.write_line(f"{passed}/{len(_RESULTS)} criteria passed")

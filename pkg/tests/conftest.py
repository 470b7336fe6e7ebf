import pytest

_RESULTS_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, ok, detail)`` to log an acceptance verdict, then assert on it."""
    results = request.config.stash.setdefault(_RESULTS_KEY, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        results[number] = (bool(ok), detail)
        print(f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

import pytest

_RESULTS = {}


@pytest.fixture()
def report():
    def record(n, passed, detail=""):
        _RESULTS[n] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

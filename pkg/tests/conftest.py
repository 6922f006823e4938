import pytest

_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict(request):
    """Record a one-line outcome for an acceptance criterion.

    The line is written as FAIL first and overwritten once the test body
    reaches its final assertion, so a crash or failed assert still shows up.
    """
    key = request.node.name.split("_")[1].upper()
    _VERDICTS[key] = f"{key} FAIL"

    def record(detail: str, ok: bool) -> None:
        _VERDICTS[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[key])

from contextlib import contextmanager

import pytest

_VERDICTS: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def criterion(capsys):
    """Context manager recording one acceptance verdict line per criterion."""

    @contextmanager
    def record(number: int, title: str):
        detail = {}
        status = "FAIL"
        try:
            yield detail
            status = "PASS"
        finally:
            text = detail.get("text", "")
            _VERDICTS[number] = (status, title, text)
            with capsys.disabled():
                print(f"\n[{status}] criterion {number:2d}: {title}{'  (' + text + ')' if text else ''}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        status, title, text = _VERDICTS[number]
        suffix = f"  ({text})" if text else ""
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}{suffix}")

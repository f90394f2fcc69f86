import pytest

_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(key: str, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {title}" + (f" ({detail})" if detail else "")
        _VERDICTS[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_VERDICTS[key])

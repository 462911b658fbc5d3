import pytest

_LINES: list[tuple[str, bool, str]] = []


class Recorder:
    def __call__(self, criterion: str, ok: bool, detail: str) -> bool:
        _LINES.append((criterion, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line for an acceptance criterion."""
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_LINES, key=lambda t: (int(t[0].rstrip("abcdefgh")), t[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}")

import time
from contextlib import contextmanager

import pytest

_LINES_KEY = pytest.StashKey[list]()


class _Verdict:
    def __init__(self):
        self.checks: list[tuple[str, bool]] = []
        self.notes: list[str] = []

    def check(self, label: str, ok: bool) -> None:
        self.checks.append((label, bool(ok)))

    def note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks)


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as v: v.check(label, ok)``; records one summary line, then asserts."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])

    @contextmanager
    def run(number: int, title: str):
        v = _Verdict()
        t0 = time.perf_counter()
        try:
            yield v
        except Exception as exc:
            lines.append((number, f"criterion {number:>2} FAIL  {title}: error {type(exc).__name__}: {exc}"))
            raise
        secs = time.perf_counter() - t0
        detail = "; ".join([f"{'ok' if ok else 'MISS'} {label}" for label, ok in v.checks] + v.notes)
        word = "PASS" if v.passed else "FAIL"
        lines.append((number, f"criterion {number:>2} {word}  {title} ({secs:.0f}s): {detail}"))
        failed = [label for label, ok in v.checks if not ok]
        assert not failed, f"criterion {number}: " + "; ".join(failed)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

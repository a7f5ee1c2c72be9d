import time

import pytest
from hypothesis import settings

settings.register_profile("desk", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("desk")

_CRITERIA: dict = {}


class Criterion:
    """Collects the measured values of one acceptance criterion for the summary line."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number = number
        self.title = title
        self.limit_s = limit_s
        self.details: list[str] = []
        self.start = time.perf_counter()
        self.elapsed = None

    def note(self, text: str) -> None:
        self.details.append(text)
        print(f"[criterion {self.number}] {text}")

    def stop(self) -> float:
        self.elapsed = time.perf_counter() - self.start
        return self.elapsed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = getattr(item, "_criterion", None)
    if crit is not None and rep.when == "call":
        if crit.elapsed is None:  # failed before reaching its own timer
            crit.stop()
        _CRITERIA[crit.number] = (crit, rep.passed)


@pytest.fixture
def criterion(request):
    def make(number: int, title: str, limit_s: float) -> Criterion:
        crit = Criterion(number, title, limit_s)
        request.node._criterion = crit
        return crit

    return make


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        crit, passed = _CRITERIA[number]
        line = (f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {crit.title} "
                f"({crit.elapsed:.1f}s, limit {crit.limit_s:g}s)")
        tr.write_line(line)
        for d in crit.details:
            tr.write_line(f"    {d}")

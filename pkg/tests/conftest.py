import time

import pytest

ACCEPTANCE_LINES: list[str] = []


class Criterion:
    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.start = time.perf_counter()

    def finish(self, ok: bool, detail: str) -> bool:
        elapsed = time.perf_counter() - self.start
        in_time = elapsed < self.limit_s
        status = "PASS" if ok and in_time else "FAIL"
        timing = f"{elapsed:.1f}s (limit {self.limit_s:.0f}s)"
        line = f"CRITERION {self.number} {status}: {self.title} | {detail} | {timing}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok and in_time


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

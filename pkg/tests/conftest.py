import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class _Criterion:
    def __init__(self, lines, number, title, limit):
        self.lines, self.number, self.title, self.limit = lines, number, title, limit
        self.checks = []

    def check(self, label, ok, detail=""):
        self.checks.append((label, bool(ok), detail))

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        elapsed = time.perf_counter() - self._t0
        self.check(f"runtime < {self.limit:g} s", elapsed < self.limit, f"{elapsed:.1f} s")
        failed = [c for c in self.checks if not c[1]]
        status = "FAIL" if failed or exc_type else "PASS"
        parts = [f"{label} [{detail}]" if detail else label for label, ok, detail in self.checks]
        if exc_type:
            parts.append(f"raised {exc_type.__name__}: {exc}")
        line = f"criterion {self.number:>2} {status}: {self.title}; " + "; ".join(parts)
        self.lines.append(line)
        print(line)
        if exc_type is None:
            assert not failed, line
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])
    return lambda number, title, limit: _Criterion(lines, number, title, limit)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

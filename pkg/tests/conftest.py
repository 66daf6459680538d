import time

import pytest

_LINES = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion.

    Usage: ``with criterion(3, "freeze invariance", limit_s=60) as c: ... c.check(ok, detail)``.
    """
    class Recorder:
        def __call__(self, number, name, limit_s=None):
            self.number, self.name, self.limit = number, name, limit_s
            self.checks = []
            return self

        def check(self, ok, detail=""):
            self.checks.append((bool(ok), detail))

        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            dt = time.perf_counter() - self.t0
            in_time = self.limit is None or dt < self.limit
            ok = exc_type is None and in_time and all(o for o, _ in self.checks) and bool(self.checks)
            details = "; ".join(d for _, d in self.checks if d)
            if exc_type is not None:
                details = f"{details}; raised {exc_type.__name__}: {exc}".lstrip("; ")
            budget = f"/{self.limit:.0f}s" if self.limit else ""
            line = (f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'} {self.name} "
                    f"[{dt:.1f}s{budget}] {details}")
            _LINES.append(line)
            print(line)
            if exc_type is None:
                assert in_time, line
                for o, d in self.checks:
                    assert o, f"criterion {self.number}: {d}"
            return False

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

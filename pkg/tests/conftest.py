import os
import time
from contextlib import contextmanager

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Time a block against its budget and log one PASS/FAIL line for it."""

    @contextmanager
    def run(number: int, title: str, budget: float):
        t0 = time.perf_counter()
        ok, why = False, ""
        try:
            yield
            ok = True
        except BaseException as exc:  # pytest's xfail/skip outcomes are not Exceptions
            why = f" ({type(exc).__name__}: {str(exc).splitlines()[0][:100] if str(exc) else ''})"
            raise
        finally:
            dt = time.perf_counter() - t0
            if ok and dt >= budget:
                ok, why = False, " (over time budget)"
            line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {dt:.4g}s of {budget:g}s{why}"
            request.config._criteria.append((number, line))
            print(line)
        assert dt < budget, f"criterion {number} took {dt:.3f}s, budget {budget}s"

    return run

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Call with (ok, detail); the line is printed now and again in the terminal summary."""
    def record(ok: bool, detail: str):
        line = f"criterion {request.node.name.split('_')[1]}: {'PASS' if ok else 'FAIL'} {detail}"
        _ACCEPTANCE[request.node.name] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[name])

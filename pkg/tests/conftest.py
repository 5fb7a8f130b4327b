import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gfocc.diff.tensor import precision, set_precision

settings.register_profile(
    "default", max_examples=100, deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, passed, detail)
    print(f"\n[acceptance {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")


@pytest.fixture(autouse=True)
def _run_precision():
    """Every test starts in 32-bit run mode; tests opt into 64-bit with ``f64``."""
    set_precision("run")
    yield
    set_precision("run")


@pytest.fixture
def f64():
    with precision("test"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{n:2d}. {'PASS' if passed else 'FAIL'}  {title}: {detail}")

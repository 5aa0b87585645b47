import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fiberfield.geometry import build_unit_grid_mesh

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def grid35():
    return build_unit_grid_mesh(35)


@pytest.fixture(scope="session")
def grid9():
    return build_unit_grid_mesh(9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

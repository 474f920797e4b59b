from __future__ import annotations

import pytest

from sdfinspect import scenes
from sdfinspect.checks import sphere_field
from sdfinspect.field import AnalyticField, sphere_sdf
from sdfinspect.marching import GridSpec
from sdfinspect.oracle import DistanceOracle


@pytest.fixture(scope="session")
def trained_sphere():
    """Unit-sphere field: 16k near + 4k far samples, tr 0.1, 30 epochs (a few seconds)."""
    return sphere_field(seed=0)


@pytest.fixture(scope="session")
def sphere_oracle():
    return DistanceOracle(scenes.unit_sphere())


@pytest.fixture
def analytic_sphere():
    """Exact radius-0.5 sphere at the origin, tr 0.1, h 0.02 lattice over [-1, 1]^3."""
    grid = GridSpec.from_box((-1, -1, -1), (1, 1, 1), 0.02)
    return AnalyticField(sphere_sdf((0, 0, 0), 0.5), 0.1, grid)


# -- acceptance summary ----------------------------------------------------------------
# test_acceptance.py appends (criterion, passed, detail); printed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

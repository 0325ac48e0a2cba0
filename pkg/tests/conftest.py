"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import pytest

from spacetime_control.mesh import build_unit_cube_mesh, refine_uniform

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def mesh2():
    return build_unit_cube_mesh(2)


@pytest.fixture(scope="session")
def mesh3():
    return build_unit_cube_mesh(3)


@pytest.fixture(scope="session")
def mesh5():
    return build_unit_cube_mesh(5)


@pytest.fixture(scope="session")
def mesh9(mesh5):
    return refine_uniform(mesh5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from hivmob import synthgen as sg
from hivmob.model import (DEFAULT_WINDOW, Antenna, AntennaTable, Department, PopulationTable,
                          SpatialHierarchy, SubPrefecture, TrajectoryTable)


def line_hierarchy(n: int, spacing: float = 10.0) -> SpatialHierarchy:
    """``n`` unit departments in a row: department ``d`` (1-based) owns
    sub-prefecture ``100 + d`` and antenna ``1000 + d``."""
    deps, subs, ants = {}, {}, {}
    for d in range(1, n + 1):
        x0 = (d - 1) * spacing
        poly = ((x0, 0.0), (x0 + spacing, 0.0), (x0 + spacing, spacing), (x0, spacing))
        c = (x0 + spacing / 2, spacing / 2)
        deps[d] = Department(1 + (d - 1) % 2, c, poly)
        subs[100 + d] = SubPrefecture(d, c)
        ants[1000 + d] = Antenna(c[0], c[1], 100 + d)
    return SpatialHierarchy(ants, subs, deps, (1, 2))


def antenna_table(rows):
    """Rows of ``(hour, origin, dest, n_calls, duration)``."""
    return AntennaTable(*zip(*rows)) if rows else AntennaTable.empty()


def traj_table(rows):
    """Rows of ``(user name, timestamp, sub-prefecture)``."""
    names = sorted({r[0] for r in rows})
    return TrajectoryTable([names.index(r[0]) for r in rows], [r[1] for r in rows], [r[2] for r in rows], names)


@pytest.fixture
def tiny():
    return line_hierarchy(3)


@pytest.fixture
def tiny_pops():
    return PopulationTable({1: 100.0, 2: 50.0, 3: 50.0}, 200.0)


@pytest.fixture(scope="session")
def world():
    return sg.generate_world(sg.WorldSpec.small(seed=3))


@pytest.fixture(scope="session")
def plan(world):
    return sg.BehaviorPlan.default(world)


@pytest.fixture(scope="session")
def cdr(world, plan):
    return sg.generate_cdr(world, plan, DEFAULT_WINDOW)


@pytest.fixture(scope="session")
def trajectories(world, plan):
    return sg.generate_trajectories(world, plan, DEFAULT_WINDOW)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record and assert one acceptance criterion: ``criterion(n, title, ok, detail)``."""

    def check(n: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

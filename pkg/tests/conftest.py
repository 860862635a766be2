from pathlib import Path

import numpy as np
import pytest

from dnnsopf.acpf import Grid
from dnnsopf.caseio import load_case

FIXTURES = Path(__file__).parent / "fixtures"
NETWORKS = ["case2", "case6ww", "case14", "case14_ieee_pglib", "case118"]


def fixture_case(name):
    path = FIXTURES / f"{name}.m"
    return load_case(path if path.exists() else name)


_GRIDS = {}


def fixture_grid(name) -> Grid:
    if name not in _GRIDS:
        _GRIDS[name] = Grid(fixture_case(name))
    return _GRIDS[name]


@pytest.fixture
def grid2():
    return fixture_grid("case2")


@pytest.fixture
def grid14():
    return fixture_grid("case14_ieee_pglib")


def random_operating_point(grid, rng, radius=0.05):
    """Dispatch near the box middle and loads near nominal, with a solved power flow."""
    from dnnsopf.acpf import LoadVector, solve_pf

    lo, hi = grid.index.x_lower, grid.index.x_upper
    mid = 0.5 * (lo + hi)
    x = mid.copy()
    ng = grid.index.n_gen
    x[:ng] = np.clip(1.0 + rng.uniform(-0.03, 0.03, ng), lo[:ng], hi[:ng])
    x[ng:] = lo[ng:] + (hi[ng:] - lo[ng:]) * rng.uniform(0.2, 0.5, x.size - ng)
    p0 = grid.nominal_loads()
    m = rng.uniform(1 - radius, 1 + radius, p0.p_d.size)
    loads = LoadVector(m * p0.p_d, m * p0.q_d)
    return x, loads, solve_pf(grid, x, loads)

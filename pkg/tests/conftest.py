from __future__ import annotations

import sys
from pathlib import Path

import pytest

# Ensure src/ package is importable when running pytest without installing the project.
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from octree_wave.octree_mesh import Material, MaterialTable, enumerate_nodes, mesh_from_cells  # noqa: E402
from octree_wave.pattern_catalog import MasterCatalog  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def configs_dir() -> Path:
    return ROOT / "data" / "configs"


@pytest.fixture(scope="session")
def catalog() -> MasterCatalog:
    return MasterCatalog()


@pytest.fixture(scope="session")
def steel() -> MaterialTable:
    return MaterialTable({1: Material(200.0, 0.3, 8.0)})


def uniform_cells(n: int, level: int, material: int = 1, offset=(0, 0, 0)):
    return [
        (level, (offset[0] + i, offset[1] + j, offset[2] + k), material)
        for i in range(n)
        for j in range(n)
        for k in range(n)
    ]


def refined_corner_cells():
    """Root of edge 2 with the octant at the origin split into eight cells."""

    coarse = [cell for cell in uniform_cells(2, 1) if cell[1] != (0, 0, 0)]
    return coarse + uniform_cells(2, 2)


@pytest.fixture
def cube_mesh_2(steel):
    return enumerate_nodes(mesh_from_cells(2.0, uniform_cells(2, 1), steel))


@pytest.fixture
def refined_mesh(steel):
    return enumerate_nodes(mesh_from_cells(2.0, refined_corner_cells(), steel))


@pytest.fixture
def two_material_mesh():
    materials = MaterialTable({1: Material(200.0, 0.3, 8.0), 2: Material(70.0, 0.3, 2.7)})
    cells = [(level, index, 2 if index[2] >= (1 << (level - 1)) else 1) for level, index, _ in refined_corner_cells()]
    return enumerate_nodes(mesh_from_cells(2.0, cells, materials))

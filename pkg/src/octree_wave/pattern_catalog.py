"""Octree cell symmetry group, pattern canonicalization and master-cell cache.

Each cell is described by the 12-bit mask of edges carrying a mid-edge node.
The 48 signed axis permutations of the cube split the 4096 masks into 144
orbits; one master cell per orbit and Poisson ratio is built at unit size and
unit material constants and reused for every element of that pattern.
"""
from __future__ import annotations

import itertools
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .cell_layout import (
    EDGE_SLOT_OFFSET,
    N_EDGES,
    N_SLOTS,
    SLOT_VECTORS,
    cell_surface,
    slot_coordinates,
    slot_index,
)
from .sbfem_kernel import element_matrices

if TYPE_CHECKING:
    from .octree_mesh import OctreeCell, OctreeMesh

logger = logging.getLogger(__name__)

N_MASKS = 1 << N_EDGES
NU_SCALE = 10**9

CACHE_MAGIC = b"OWMASTER"
CACHE_VERSION = 1
# Bump when the face tessellation changes; cached matrices depend on it.
TESSELLATION_RULE = 1
_HEADER = struct.Struct("<8sIII")
_ENTRY = struct.Struct("<BqId")


class PatternError(ValueError):
    """Raised for invalid patterns, transforms or cache contents."""


@dataclass(frozen=True, eq=False)
class CellTransform:
    """Signed permutation Q mapping cell positions p to master positions Q p.

    ``node_perm[s]`` is the master slot receiving cell slot ``s``. For master
    displacement component ``d`` the cell component is ``axis[d]`` with sign
    ``sign[d]``.
    """

    index: int
    matrix: np.ndarray
    node_perm: np.ndarray
    edge_perm: np.ndarray
    axis: tuple[int, int, int]
    sign: tuple[int, int, int]

    @property
    def inverse_node_perm(self) -> np.ndarray:
        inverse = np.empty_like(self.node_perm)
        inverse[self.node_perm] = np.arange(N_SLOTS)
        return inverse

    @property
    def sign_perm(self) -> np.ndarray:
        """Per-DOF signs for one node, in master component order."""

        return np.asarray(self.sign, dtype=float)

    def apply_mask(self, edge_mask: int) -> int:
        image = 0
        for edge in range(N_EDGES):
            if (edge_mask >> edge) & 1:
                image |= 1 << int(self.edge_perm[edge])
        return image


def _make_transform(index: int, matrix: np.ndarray) -> CellTransform:
    node_perm = np.array([slot_index(matrix @ vec) for vec in SLOT_VECTORS], dtype=np.int64)
    edge_perm = node_perm[EDGE_SLOT_OFFSET : EDGE_SLOT_OFFSET + N_EDGES] - EDGE_SLOT_OFFSET
    axis = tuple(int(np.flatnonzero(row)[0]) for row in matrix)
    sign = tuple(int(matrix[d, axis[d]]) for d in range(3))
    matrix.setflags(write=False)
    return CellTransform(index, matrix, node_perm, edge_perm, axis, sign)  # type: ignore[arg-type]


@lru_cache(maxsize=1)
def transforms48() -> tuple[CellTransform, ...]:
    """All rotations and reflections of the cube; index 1 is the identity."""

    transforms = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            matrix = np.zeros((3, 3), dtype=np.int64)
            matrix[np.arange(3), perm] = signs
            transforms.append(_make_transform(len(transforms) + 1, matrix))
    return tuple(transforms)



@lru_cache(maxsize=1)
def _orbit_table() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    masks = np.arange(N_MASKS, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(N_EDGES)) & 1
    images = np.empty((N_MASKS, 48), dtype=np.int64)
    for column, transform in enumerate(transforms48()):
        images[:, column] = bits @ (np.int64(1) << transform.edge_perm)
    canonical = images.min(axis=1)
    choice = images.argmin(axis=1)
    representatives = np.unique(canonical)
    ids = np.searchsorted(representatives, canonical) + 1
    return representatives, ids, choice + 1


def pattern_count() -> int:
    return int(_orbit_table()[0].size)


def canonicalize(edge_mask: int) -> tuple[int, int]:
    """Return (canonical_id, transform_id) for a 12-bit edge mask.

    The canonical mask is the smallest mask in the orbit and the transform is
    the first (lowest index) one that maps ``edge_mask`` onto it.
    """

    if not 0 <= int(edge_mask) < N_MASKS:
        raise PatternError(f"edge mask {edge_mask} outside [0, {N_MASKS - 1}]")
    _, ids, transform_ids = _orbit_table()
    return int(ids[edge_mask]), int(transform_ids[edge_mask])


def canonicalize_many(edge_masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, ids, transform_ids = _orbit_table()
    masks = np.asarray(edge_masks, dtype=np.int64)
    return ids[masks], transform_ids[masks]


def canonical_mask(canonical_id: int) -> int:
    representatives = _orbit_table()[0]
    if not 1 <= canonical_id <= representatives.size:
        raise PatternError(f"canonical id {canonical_id} outside [1, {representatives.size}]")
    return int(representatives[canonical_id - 1])


def orbit_sizes() -> np.ndarray:
    ids = _orbit_table()[1]
    return np.bincount(ids)[1:]


@dataclass(frozen=True, eq=False)
class MasterCell:
    """Unit-size master cell of one pattern at one Poisson ratio.

    Matrices are for E = 1, rho = 1 and edge length 1; DOFs follow the node
    order of ``slots`` with x, y, z interleaved.
    """

    canonical_id: int
    edge_mask: int
    poisson_ratio: float
    slots: tuple[int, ...]
    node_layout: np.ndarray
    stiffness: np.ndarray
    lumped_mass: np.ndarray
    consistent_mass: np.ndarray
    omega_max: float

    @property
    def n_dof(self) -> int:
        return self.stiffness.shape[0]


def nu_key(poisson_ratio: float) -> int:
    return int(round(poisson_ratio * NU_SCALE))


def build_master_cell(canonical_id: int, poisson_ratio: float) -> MasterCell:
    """Build (or fetch from the in-process cache) the master cell for a pattern."""

    return _build_master_cell(canonical_id, nu_key(poisson_ratio))


@lru_cache(maxsize=None)
def _build_master_cell(canonical_id: int, key: int) -> MasterCell:
    mask = canonical_mask(canonical_id)
    poisson_ratio = key / NU_SCALE
    slots, elements = cell_surface(mask)
    layout = slot_coordinates(slots)
    matrices = element_matrices(layout, elements, 1.0, poisson_ratio, 1.0, cell_id=f"pattern {canonical_id}")
    logger.debug(
        f"master {canonical_id} (mask {mask:#05x}, nu={poisson_ratio:g}): "
        f"{len(slots)} nodes, omega_max={matrices.omega_max:.4f}"
    )
    return MasterCell(
        canonical_id=canonical_id,
        edge_mask=mask,
        poisson_ratio=poisson_ratio,
        slots=slots,
        node_layout=layout,
        stiffness=matrices.stiffness,
        lumped_mass=matrices.lumped_mass,
        consistent_mass=matrices.consistent_mass,
        omega_max=matrices.omega_max,
    )


class MasterCatalog:
    """Master cells keyed by (canonical_id, quantized Poisson ratio)."""

    def __init__(self, cells: Iterable[MasterCell] = (), auto_build: bool = True) -> None:
        self._cells: dict[tuple[int, int], MasterCell] = {}
        self.auto_build = auto_build
        for cell in cells:
            self._cells[(cell.canonical_id, nu_key(cell.poisson_ratio))] = cell

    def __len__(self) -> int:
        return len(self._cells)

    def __contains__(self, key: tuple[int, float]) -> bool:
        canonical_id, poisson_ratio = key
        return (canonical_id, nu_key(poisson_ratio)) in self._cells

    def keys(self) -> list[tuple[int, float]]:
        return [(cid, key / NU_SCALE) for cid, key in sorted(self._cells)]

    def get(self, canonical_id: int, poisson_ratio: float) -> MasterCell:
        key = (canonical_id, nu_key(poisson_ratio))
        cell = self._cells.get(key)
        if cell is None:
            if not self.auto_build:
                raise PatternError(f"no master cell for pattern {canonical_id} at nu={poisson_ratio:g}")
            cell = build_master_cell(canonical_id, poisson_ratio)
            self._cells[key] = cell
        return cell

    def precompute(
        self,
        poisson_ratios: Iterable[float],
        canonical_ids: Iterable[int] | None = None,
        workers: int = 1,
    ) -> None:
        ids = list(canonical_ids) if canonical_ids is not None else list(range(1, pattern_count() + 1))
        todo = [
            (cid, nu)
            for nu in poisson_ratios
            for cid in ids
            if (cid, nu_key(nu)) not in self._cells
        ]
        logger.info(f"Building {len(todo)} master cell(s) with {workers} worker(s)")
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                built = list(pool.map(lambda item: build_master_cell(*item), todo))
        else:
            built = [build_master_cell(cid, nu) for cid, nu in todo]
        for cell in built:
            self._cells[(cell.canonical_id, nu_key(cell.poisson_ratio))] = cell
        logger.info(f"✓ Catalog holds {len(self._cells)} master cell(s)")

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        chunks = [_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, TESSELLATION_RULE, len(self._cells))]
        for (cid, key), cell in sorted(self._cells.items()):
            chunks.append(_ENTRY.pack(cid, key, cell.n_dof, cell.omega_max))
            chunks.append(np.ascontiguousarray(cell.stiffness, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(cell.lumped_mass, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(cell.consistent_mass, dtype="<f8").tobytes())
        path.write_bytes(b"".join(chunks))
        logger.info(f"✓ Wrote {len(self._cells)} master cell(s) to {path}")

    @classmethod
    def load(cls, path: Path, auto_build: bool = True) -> "MasterCatalog":
        data = path.read_bytes()
        if len(data) < _HEADER.size:
            raise PatternError(f"{path} is too short to be a master-cell cache")
        magic, version, rule, count = _HEADER.unpack_from(data, 0)
        if magic != CACHE_MAGIC:
            raise PatternError(f"{path} is not a master-cell cache")
        if version != CACHE_VERSION or rule != TESSELLATION_RULE:
            raise PatternError(
                f"{path} was written with format {version}/rule {rule}; rebuild it with `precompute`"
            )
        offset = _HEADER.size
        cells = []
        for _ in range(count):
            cid, key, n_dof, omega = _ENTRY.unpack_from(data, offset)
            offset += _ENTRY.size
            square = n_dof * n_dof * 8
            stiffness = np.frombuffer(data, dtype="<f8", count=n_dof * n_dof, offset=offset).reshape(n_dof, n_dof)
            offset += square
            lumped = np.frombuffer(data, dtype="<f8", count=n_dof, offset=offset)
            offset += n_dof * 8
            consistent = np.frombuffer(data, dtype="<f8", count=n_dof * n_dof, offset=offset).reshape(n_dof, n_dof)
            offset += square
            mask = canonical_mask(cid)
            slots, _ = cell_surface(mask)
            if 3 * len(slots) != n_dof:
                raise PatternError(f"{path}: pattern {cid} stores {n_dof} DOFs, expected {3 * len(slots)}")
            cells.append(
                MasterCell(
                    canonical_id=cid,
                    edge_mask=mask,
                    poisson_ratio=key / NU_SCALE,
                    slots=slots,
                    node_layout=slot_coordinates(slots),
                    stiffness=stiffness.astype(float),
                    lumped_mass=lumped.astype(float),
                    consistent_mass=consistent.astype(float),
                    omega_max=omega,
                )
            )
        if offset != len(data):
            raise PatternError(f"{path}: {len(data) - offset} trailing bytes")
        logger.info(f"✓ Loaded {len(cells)} master cell(s) from {path}")
        return cls(cells, auto_build=auto_build)


@lru_cache(maxsize=None)
def dof_template(canonical_id: int, transform_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cell slot, cell component and sign for every master DOF.

    Master node ``k`` sits at slot ``slots[k]``; the cell node feeding it is at
    ``Q^T`` of that position.
    """

    transform = transforms48()[transform_id - 1]
    master_slots = np.asarray(cell_surface(canonical_mask(canonical_id))[0], dtype=np.int64)
    cell_slots = transform.inverse_node_perm[master_slots]
    slot_per_dof = np.repeat(cell_slots, 3)
    component = np.tile(np.asarray(transform.axis, dtype=np.int64), master_slots.size)
    signs = np.tile(transform.sign_perm, master_slots.size)
    for array in (slot_per_dof, component, signs):
        array.setflags(write=False)
    return slot_per_dof, component, signs


@dataclass(frozen=True, eq=False)
class ElementDofMap:
    """Signed map from global DOFs to the master DOF order of one element."""

    element: int
    dofs: np.ndarray
    signs: np.ndarray

    def gather(self, displacement: np.ndarray) -> np.ndarray:
        return self.signs * displacement[self.dofs]

    def scatter(self, target: np.ndarray, values: np.ndarray) -> None:
        np.add.at(target, self.dofs, self.signs * values)


def element_dofs(cell_nodes: np.ndarray, canonical_id: int, transform_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Global DOFs and signs (master order) for rows of a ``cell_nodes`` table."""

    slot_per_dof, component, signs = dof_template(canonical_id, transform_id)
    nodes = np.atleast_2d(cell_nodes)[:, slot_per_dof]
    return 3 * nodes + component, np.broadcast_to(signs, nodes.shape)


def element_dof_map(cell: "OctreeCell", mesh: "OctreeMesh", element: int | None = None) -> ElementDofMap:
    index = mesh.cells.index(cell) if element is None else element
    slot_per_dof, _, _ = dof_template(cell.canonical_id, cell.transform_id)
    row = mesh.cell_nodes[index]
    missing = row[slot_per_dof] < 0
    if np.any(missing):
        slots = sorted(set(slot_per_dof[missing].tolist()))
        raise PatternError(f"element {index}: no global node for slot(s) {slots}")
    dofs, signs = element_dofs(row, cell.canonical_id, cell.transform_id)
    return ElementDofMap(element=index, dofs=dofs[0].copy(), signs=np.asarray(signs[0], dtype=float).copy())


__all__ = [
    "CellTransform",
    "ElementDofMap",
    "MasterCatalog",
    "MasterCell",
    "PatternError",
    "build_master_cell",
    "canonical_mask",
    "canonicalize",
    "canonicalize_many",
    "dof_template",
    "element_dof_map",
    "element_dofs",
    "nu_key",
    "orbit_sizes",
    "pattern_count",
    "transforms48",
]

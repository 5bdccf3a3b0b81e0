"""Balanced octree meshes over a cubic root domain.

Cells are addressed by ``(level, i, j, k)``: a cell of level ``l`` has edge
``root_size / 2**l`` and origin ``origin + (i, j, k) * size``. Meshes are built
top-down from a voxel label grid (or analytic primitives voxelized on the fly),
2:1 balanced across faces and edges, then numbered. Hanging nodes appear at
edge midpoints touched by a smaller neighbour and at the centres of faces with
at least one such edge.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cell_layout import (
    EDGE_SLOT_OFFSET,
    FACE_NORMALS,
    FACE_SLOT_OFFSET,
    N_EDGES,
    N_SLOTS,
    SLOT_VECTORS,
    face_discretization,
    face_edges,
    face_flags,
    face_point_slot,
)
from .pattern_catalog import canonicalize_many

logger = logging.getLogger(__name__)

# Face (6) and edge (12) neighbour directions used by the 2:1 rule.
BALANCE_DIRECTIONS: tuple[tuple[int, int, int], ...] = tuple(
    (a, b, c)
    for a in (-1, 0, 1)
    for b in (-1, 0, 1)
    for c in (-1, 0, 1)
    if 1 <= abs(a) + abs(b) + abs(c) <= 2
)

CellKey = tuple[int, int, int, int]


class MeshError(ValueError):
    """Raised for invalid geometry, criteria or mesh state."""


@dataclass(frozen=True)
class Material:
    youngs_modulus: float
    poisson_ratio: float
    density: float

    def __post_init__(self) -> None:
        if self.youngs_modulus <= 0:
            raise MeshError(f"Young's modulus must be positive, got {self.youngs_modulus}")
        if self.density <= 0:
            raise MeshError(f"density must be positive, got {self.density}")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise MeshError(f"Poisson ratio must lie in (-1, 0.5), got {self.poisson_ratio}")


@dataclass(frozen=True)
class MaterialTable:
    materials: Mapping[int, Material]

    def __post_init__(self) -> None:
        for key in self.materials:
            if int(key) <= 0:
                raise MeshError(f"material id {key} must be positive (0 is void)")

    def __getitem__(self, material_id: int) -> Material:
        try:
            return self.materials[int(material_id)]
        except KeyError as exc:
            raise MeshError(f"material {material_id} is not defined") from exc

    def __contains__(self, material_id: object) -> bool:
        return material_id in self.materials

    def __len__(self) -> int:
        return len(self.materials)

    def ids(self) -> list[int]:
        return sorted(int(k) for k in self.materials)

    @classmethod
    def from_mapping(cls, raw: Mapping[object, Mapping[str, float]]) -> "MaterialTable":
        table = {}
        for key, values in raw.items():
            table[int(key)] = Material(
                youngs_modulus=float(values["E"]),
                poisson_ratio=float(values["nu"]),
                density=float(values["rho"]),
            )
        return cls(table)


@dataclass
class VoxelGrid:
    dims: tuple[int, int, int]
    spacing: float
    labels: np.ndarray
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)  # type: ignore[assignment]
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise MeshError(f"voxel dims must be 3 positive integers, got {self.dims}")
        if self.spacing <= 0:
            raise MeshError(f"voxel spacing must be positive, got {self.spacing}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != self.dims:
            raise MeshError(f"labels shape {self.labels.shape} does not match dims {self.dims}")

    @classmethod
    def from_npy(cls, path: Path, spacing: float, origin: Sequence[float] = (0.0, 0.0, 0.0)) -> "VoxelGrid":
        labels = np.load(path)
        return cls(labels.shape, spacing, labels, tuple(float(c) for c in origin))  # type: ignore[arg-type]


@dataclass(frozen=True)
class Box:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]
    material: int

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= np.asarray(self.lower)) & (points <= np.asarray(self.upper)), axis=-1)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    material: int

    def contains(self, points: np.ndarray) -> np.ndarray:
        offset = points - np.asarray(self.center)
        return np.einsum("...i,...i->...", offset, offset) <= self.radius**2


@dataclass(frozen=True)
class PrimitiveSet:
    """Analytic geometry; later primitives override earlier ones."""

    root_size: float
    primitives: tuple[Box | Sphere, ...]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BuildCriteria:
    max_level: int
    min_level: int = 0
    homogeneity: bool = True
    refine_boundary: bool = True

    def __post_init__(self) -> None:
        if self.min_level < 0:
            raise MeshError(f"min_level must be non-negative, got {self.min_level}")
        if self.max_level < self.min_level:
            raise MeshError(f"max_level {self.max_level} is below min_level {self.min_level}")


@dataclass(frozen=True)
class OctreeCell:
    level: int
    index: tuple[int, int, int]
    origin: tuple[float, float, float]
    size: float
    material: int
    edge_mask: int = 0
    canonical_id: int = 0
    transform_id: int = 0

    @property
    def key(self) -> CellKey:
        return (self.level, *self.index)

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.size


@dataclass(frozen=True, eq=False)
class OctreeMesh:
    """Immutable mesh; ``nodes``/``cell_nodes`` are set by ``enumerate_nodes``.

    ``cell_nodes[e, s]`` is the global node in slot ``s`` of cell ``e`` (see
    ``cell_layout``), or -1 if the slot carries no node.
    """

    cells: tuple[OctreeCell, ...]
    root_size: float
    materials: MaterialTable
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    nodes: np.ndarray | None = None
    cell_nodes: np.ndarray | None = None

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_nodes(self) -> int:
        return 0 if self.nodes is None else len(self.nodes)

    @property
    def n_dof(self) -> int:
        return 3 * self.n_nodes

    @property
    def is_numbered(self) -> bool:
        return self.cell_nodes is not None

    @property
    def finest_level(self) -> int:
        return max((cell.level for cell in self.cells), default=0)

    def numbered(self) -> "OctreeMesh":
        if not self.is_numbered:
            raise MeshError("mesh nodes are not enumerated yet")
        return self

    def levels(self) -> np.ndarray:
        return np.array([cell.level for cell in self.cells], dtype=np.int64)

    def sizes(self) -> np.ndarray:
        return np.array([cell.size for cell in self.cells])

    def centroids(self) -> np.ndarray:
        return np.array([cell.centroid for cell in self.cells]).reshape(-1, 3)

    def material_ids(self) -> np.ndarray:
        return np.array([cell.material for cell in self.cells], dtype=np.int64)

    def keys(self) -> list[CellKey]:
        return [cell.key for cell in self.cells]

    def volume(self) -> float:
        return float(np.sum(self.sizes() ** 3))


def _cell(root_size: float, origin: np.ndarray, key: CellKey, material: int) -> OctreeCell:
    level, i, j, k = key
    size = root_size / (1 << level)
    corner = tuple(float(c) for c in origin + size * np.array([i, j, k], dtype=float))
    return OctreeCell(level=level, index=(i, j, k), origin=corner, size=size, material=int(material))  # type: ignore[arg-type]


def _sorted_keys(keys: Iterable[CellKey]) -> list[CellKey]:
    keys = list(keys)
    finest = max((key[0] for key in keys), default=0)
    return sorted(keys, key=lambda key: (*(c << (finest - key[0]) for c in key[1:]), key[0]))


def _mesh_from_leaves(
    leaves: Mapping[CellKey, int], root_size: float, origin: np.ndarray, materials: MaterialTable
) -> OctreeMesh:
    cells = tuple(_cell(root_size, origin, key, leaves[key]) for key in _sorted_keys(leaves))
    return OctreeMesh(cells=cells, root_size=root_size, materials=materials, origin=np.array(origin, dtype=float))


def mesh_from_cells(
    root_size: float,
    cells: Iterable[tuple[int, tuple[int, int, int], int]],
    materials: MaterialTable,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> OctreeMesh:
    """Mesh from explicit ``(level, (i, j, k), material)`` leaves."""

    leaves: dict[CellKey, int] = {}
    for level, index, material in cells:
        if material not in materials:
            raise MeshError(f"cell {(level, *index)} uses undefined material {material}")
        if any(not 0 <= c < (1 << level) for c in index):
            raise MeshError(f"cell index {index} outside level {level}")
        leaves[(int(level), *(int(c) for c in index))] = int(material)  # type: ignore[misc]
    if not leaves:
        raise MeshError("no cells given")
    _check_disjoint(leaves)
    return _mesh_from_leaves(leaves, float(root_size), np.asarray(origin, dtype=float), materials)


def _check_disjoint(leaves: Mapping[CellKey, int]) -> None:
    for level, i, j, k in leaves:
        for up in range(1, level + 1):
            if (level - up, i >> up, j >> up, k >> up) in leaves:
                raise MeshError(f"cell {(level, i, j, k)} overlaps its ancestor")


def voxelize(geometry: PrimitiveSet, level: int) -> VoxelGrid:
    """Sample primitives at voxel centres of a ``2**level`` grid over the root."""

    if not geometry.primitives:
        raise MeshError("primitive set is empty")
    n = 1 << level
    spacing = geometry.root_size / n
    axis = (np.arange(n) + 0.5) * spacing
    origin = np.asarray(geometry.origin, dtype=float)
    points = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1) + origin
    labels = np.zeros((n, n, n), dtype=np.int64)
    for primitive in geometry.primitives:
        labels[primitive.contains(points)] = primitive.material
    logger.debug(f"Voxelized {len(geometry.primitives)} primitive(s) on a {n}^3 grid")
    return VoxelGrid((n, n, n), spacing, labels, tuple(origin))  # type: ignore[arg-type]


def _pad_to_root(grid: VoxelGrid) -> tuple[np.ndarray, int]:
    depth = max(0, math.ceil(math.log2(max(grid.dims))))
    size = 1 << depth
    padded = np.zeros((size, size, size), dtype=np.int64)
    padded[: grid.dims[0], : grid.dims[1], : grid.dims[2]] = grid.labels
    return padded, depth


def _voxel_range(level: int, index: tuple[int, int, int], depth: int) -> tuple[slice, ...]:
    if level <= depth:
        n = 1 << (depth - level)
        return tuple(slice(c * n, (c + 1) * n) for c in index)
    shift = level - depth
    return tuple(slice(c >> shift, (c >> shift) + 1) for c in index)


def _touches_boundary(labels: np.ndarray, window: tuple[slice, ...], label: int) -> bool:
    limit = labels.shape[0]
    shell = tuple(slice(max(s.start - 1, 0), min(s.stop + 1, limit)) for s in window)
    return bool(np.any(labels[shell] != label))


def build_octree(
    geometry: VoxelGrid | PrimitiveSet,
    criteria: BuildCriteria,
    materials: MaterialTable,
) -> OctreeMesh:
    """Recursively bisect the root cube until cells are homogeneous or at max_level."""

    if isinstance(geometry, PrimitiveSet):
        grid = voxelize(geometry, criteria.max_level)
        root_size = float(geometry.root_size)
    else:
        grid = geometry
        root_size = float(grid.spacing * (1 << max(0, math.ceil(math.log2(max(grid.dims))))))
    labels, depth = _pad_to_root(grid)
    present = np.unique(labels)
    if present.size == 1 and present[0] == 0:
        raise MeshError("geometry is empty (no non-void voxels)")
    for label in present[present != 0]:
        if int(label) not in materials:
            raise MeshError(f"voxel label {label} has no material entry")

    leaves: dict[CellKey, int] = {}
    stack: list[CellKey] = [(0, 0, 0, 0)]
    while stack:
        key = stack.pop()
        level, index = key[0], key[1:]
        window = _voxel_range(level, index, depth)  # type: ignore[arg-type]
        block = labels[window]
        values = np.unique(block)
        split = False
        if level < criteria.min_level:
            split = True
        elif values.size == 1 and (criteria.homogeneity or level >= criteria.max_level):
            label = int(values[0])
            if label == 0:
                continue
            if (
                criteria.refine_boundary
                and level < criteria.max_level
                and _touches_boundary(labels, window, label)
            ):
                split = True
            else:
                leaves[key] = label
        elif level >= criteria.max_level:
            label = int(np.argmax(np.bincount(block.ravel())))
            if label != 0:
                leaves[key] = label
        else:
            split = True
        if split:
            for child in _children(key):
                stack.append(child)

    if not leaves:
        raise MeshError("no cells retained after void removal")
    mesh = _mesh_from_leaves(leaves, root_size, np.asarray(grid.origin, dtype=float), materials)
    logger.info(f"✓ Built octree with {mesh.n_cells} cell(s), finest level {mesh.finest_level}")
    return mesh


def _children(key: CellKey) -> list[CellKey]:
    level, i, j, k = key
    return [
        (level + 1, 2 * i + a, 2 * j + b, 2 * k + c)
        for a in (0, 1)
        for b in (0, 1)
        for c in (0, 1)
    ]


def _containing_leaf(
    leaves: Mapping[CellKey, int], finest: int, point: tuple[int, int, int]
) -> CellKey | None:
    limit = 1 << finest
    if any(not 0 <= c < limit for c in point):
        return None
    for level in range(finest + 1):
        shift = finest - level
        key = (level, point[0] >> shift, point[1] >> shift, point[2] >> shift)
        if key in leaves:
            return key
    return None


def _probe_point(key: CellKey, direction: tuple[int, int, int], finest: int) -> tuple[int, int, int]:
    level = key[0]
    span = 1 << (finest - level)
    point = []
    for c, d in zip(key[1:], direction):
        base = c * span
        point.append(base if d == 0 else (base + span if d > 0 else base - 1))
    return tuple(point)  # type: ignore[return-value]


def _unbalanced_neighbour(
    leaves: Mapping[CellKey, int], finest: int, key: CellKey
) -> CellKey | None:
    for direction in BALANCE_DIRECTIONS:
        neighbour = _containing_leaf(leaves, finest, _probe_point(key, direction, finest))
        if neighbour is not None and neighbour[0] < key[0] - 1:
            return neighbour
    return None


def is_balanced(mesh: OctreeMesh) -> bool:
    leaves = {cell.key: cell.material for cell in mesh.cells}
    finest = mesh.finest_level
    return all(_unbalanced_neighbour(leaves, finest, key) is None for key in leaves)


def balance_octree(mesh: OctreeMesh) -> OctreeMesh:
    """Split cells until face- and edge-adjacent cells differ by at most one level."""

    leaves = {cell.key: cell.material for cell in mesh.cells}
    finest = mesh.finest_level
    queue = _sorted_keys(leaves)
    queue.reverse()
    splits = 0
    while queue:
        key = queue.pop()
        if key not in leaves:
            continue
        neighbour = _unbalanced_neighbour(leaves, finest, key)
        if neighbour is None:
            continue
        material = leaves.pop(neighbour)
        for child in _children(neighbour):
            leaves[child] = material
            queue.append(child)
        queue.append(key)
        splits += 1
    if splits == 0:
        logger.info("✓ Mesh already balanced")
        return mesh
    balanced = _mesh_from_leaves(leaves, mesh.root_size, mesh.origin, mesh.materials)
    logger.info(f"✓ Balanced octree: {splits} split(s), {balanced.n_cells} cell(s)")
    return balanced


def enumerate_nodes(mesh: OctreeMesh) -> OctreeMesh:
    """Number corner and hanging nodes and classify every cell's pattern."""

    if not is_balanced(mesh):
        raise MeshError("mesh violates the 2:1 rule; run balance_octree first")
    finest = mesh.finest_level
    levels = mesh.levels()
    index = np.array([cell.index for cell in mesh.cells], dtype=np.int64).reshape(-1, 3)
    # half-size of each cell in units of half the finest cell edge
    half = np.int64(1) << (finest - levels)
    centre = (2 * index + 1) * half[:, None]
    slot_points = centre[:, None, :] + SLOT_VECTORS[None, :, :] * half[:, None, None]

    base = np.int64((1 << (finest + 1)) + 1)
    codes = (slot_points[..., 0] * base + slot_points[..., 1]) * base + slot_points[..., 2]
    corner_codes = np.unique(codes[:, :8])
    halved = np.isin(codes[:, EDGE_SLOT_OFFSET : EDGE_SLOT_OFFSET + N_EDGES], corner_codes)
    masks = halved @ (np.int64(1) << np.arange(N_EDGES))

    present = np.zeros((mesh.n_cells, N_SLOTS), dtype=bool)
    present[:, : EDGE_SLOT_OFFSET + N_EDGES] = True
    present[:, EDGE_SLOT_OFFSET : EDGE_SLOT_OFFSET + N_EDGES] = halved
    for face in range(6):
        present[:, FACE_SLOT_OFFSET + face] = halved[:, list(face_edges(face))].any(axis=1)

    unique_codes, inverse = np.unique(codes[present], return_inverse=True)
    cell_nodes = np.full((mesh.n_cells, N_SLOTS), -1, dtype=np.int64)
    cell_nodes[present] = inverse
    z = unique_codes % base
    y = (unique_codes // base) % base
    x = unique_codes // (base * base)
    unit = mesh.root_size / float(1 << (finest + 1))
    nodes = mesh.origin + unit * np.stack([x, y, z], axis=1).astype(float)

    canonical_ids, transform_ids = canonicalize_many(masks)
    cells = tuple(
        replace(cell, edge_mask=int(mask), canonical_id=int(cid), transform_id=int(tid))
        for cell, mask, cid, tid in zip(mesh.cells, masks, canonical_ids, transform_ids)
    )
    hanging = int(np.count_nonzero(present[:, 8:]))
    logger.info(f"✓ Numbered {len(nodes)} node(s) ({hanging} hanging slot(s)) over {mesh.n_cells} cell(s)")
    return replace(mesh, cells=cells, nodes=nodes, cell_nodes=cell_nodes)


class CellIndex:
    """Leaf lookup by integer position, used for neighbour queries."""

    def __init__(self, mesh: OctreeMesh) -> None:
        self.mesh = mesh
        self.finest = mesh.finest_level
        self.position = {cell.key: e for e, cell in enumerate(mesh.cells)}

    def face_neighbours(self, element: int, face: int) -> list[int]:
        key = self.mesh.cells[element].key
        normal = tuple(int(c) for c in FACE_NORMALS[face])
        found = _containing_leaf(self.position, self.finest, _probe_point(key, normal, self.finest))  # type: ignore[arg-type]
        if found is not None and found[0] <= key[0]:
            return [self.position[found]]
        level, *index = key
        axis = int(np.flatnonzero(FACE_NORMALS[face])[0])
        across = []
        for a in (0, 1):
            for b in (0, 1):
                child = [2 * c for c in index]
                child[axis] = 2 * index[axis] + (2 if normal[axis] > 0 else -1)
                tangential = [t for t in range(3) if t != axis]
                child[tangential[0]] += a
                child[tangential[1]] += b
                candidate = (level + 1, *child)
                if candidate in self.position:
                    across.append(self.position[candidate])  # type: ignore[index]
        return across

    def face_adjacency(self) -> list[tuple[int, int]]:
        pairs = set()
        for element in range(self.mesh.n_cells):
            for face in range(6):
                for other in self.face_neighbours(element, face):
                    pairs.add((min(element, other), max(element, other)))
        return sorted(pairs)

    def exposed_faces(self) -> list[tuple[int, int]]:
        """(element, face) pairs with nothing across them."""

        return [
            (element, face)
            for element in range(self.mesh.n_cells)
            for face in range(6)
            if not self.face_neighbours(element, face)
        ]


def face_nodes(mesh: OctreeMesh, element: int, face: int) -> list[tuple[str, np.ndarray]]:
    """Surface elements of one cell face as (kind, global node ids)."""

    mesh.numbered()
    cell = mesh.cells[element]
    flags = face_flags(cell.edge_mask, face)
    row = mesh.cell_nodes[element]  # type: ignore[index]
    return [
        (surface.kind, np.array([row[face_point_slot(face, uv)] for uv in surface.points], dtype=np.int64))
        for surface in face_discretization(flags)
    ]


def level_histogram(mesh: OctreeMesh) -> dict[int, int]:
    levels, counts = np.unique(mesh.levels(), return_counts=True)
    return {int(level): int(count) for level, count in zip(levels, counts)}


def pattern_histogram(mesh: OctreeMesh) -> dict[int, int]:
    ids, counts = np.unique([cell.canonical_id for cell in mesh.cells], return_counts=True)
    return {int(cid): int(count) for cid, count in zip(ids, counts)}


__all__ = [
    "BALANCE_DIRECTIONS",
    "Box",
    "BuildCriteria",
    "CellIndex",
    "Material",
    "MaterialTable",
    "MeshError",
    "OctreeCell",
    "OctreeMesh",
    "PrimitiveSet",
    "Sphere",
    "VoxelGrid",
    "balance_octree",
    "build_octree",
    "enumerate_nodes",
    "face_nodes",
    "is_balanced",
    "level_histogram",
    "mesh_from_cells",
    "pattern_histogram",
    "voxelize",
]

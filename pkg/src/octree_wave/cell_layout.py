"""Fixed numbering of the 26 node slots of an octree cell.

A slot is identified by its position vector p in {-1, 0, 1}^3 \\ {0}, measured
from the cell centre in units of half the edge length:

* slots 0-7   corners, in VTK hexahedron order
* slots 8-19  mid-edge nodes; edge ``k`` occupies slot ``8 + k`` and bit ``k``
  of a cell's ``edge_mask``
* slots 20-25 face centres, ordered -x, +x, -y, +y, -z, +z

Edge ``k`` joins the corners listed in ``EDGE_CORNERS[k]``. This numbering is
also the one written into mesh files and the master-cell cache.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

CORNER_VECTORS = np.array(
    [
        (-1, -1, -1),
        (1, -1, -1),
        (1, 1, -1),
        (-1, 1, -1),
        (-1, -1, 1),
        (1, -1, 1),
        (1, 1, 1),
        (-1, 1, 1),
    ],
    dtype=np.int64,
)

EDGE_CORNERS: tuple[tuple[int, int], ...] = (
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
)

FACE_NORMALS = np.array(
    [
        (-1, 0, 0),
        (1, 0, 0),
        (0, -1, 0),
        (0, 1, 0),
        (0, 0, -1),
        (0, 0, 1),
    ],
    dtype=np.int64,
)

N_SLOTS = 26
N_EDGES = 12
CORNER_SLOTS = tuple(range(8))
EDGE_SLOT_OFFSET = 8
FACE_SLOT_OFFSET = 20

EDGE_VECTORS = np.array(
    [(CORNER_VECTORS[a] + CORNER_VECTORS[b]) // 2 for a, b in EDGE_CORNERS],
    dtype=np.int64,
)

SLOT_VECTORS = np.vstack([CORNER_VECTORS, EDGE_VECTORS, FACE_NORMALS])

_SLOT_LOOKUP = {tuple(int(c) for c in vec): idx for idx, vec in enumerate(SLOT_VECTORS)}

# Face-local corner and mid-edge positions, counter-clockwise seen from outside.
_FACE_CORNERS_UV = ((-1, -1), (1, -1), (1, 1), (-1, 1))
_FACE_MIDEDGES_UV = ((0, -1), (1, 0), (0, 1), (-1, 0))

ARRANGEMENTS = (
    "quad",
    "one_halved",
    "two_adjacent",
    "two_opposite",
    "three_halved",
    "four_halved",
)


@dataclass(frozen=True)
class SurfaceElement:
    """Linear boundary element of a cell face.

    ``points`` are face-local (u, v) positions in {-1, 0, 1}^2 ordered so that
    the element normal points out of the cell.
    """

    kind: str
    points: tuple[tuple[int, int], ...]

    @property
    def n_nodes(self) -> int:
        return len(self.points)


def slot_index(vector: Sequence[int]) -> int:
    key = tuple(int(c) for c in vector)
    if key not in _SLOT_LOOKUP:
        raise ValueError(f"{key} is not a cell node slot")
    return _SLOT_LOOKUP[key]


def face_frame(face: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (normal, t1, t2) for ``face`` with t1 x t2 = normal."""

    normal = FACE_NORMALS[face]
    axis = int(np.flatnonzero(normal)[0])
    sign = int(normal[axis])
    eye = np.eye(3, dtype=np.int64)
    b, c = eye[(axis + 1) % 3], eye[(axis + 2) % 3]
    if sign > 0:
        return normal, b, c
    return normal, c, b


def face_point_slot(face: int, uv: tuple[int, int]) -> int:
    normal, t1, t2 = face_frame(face)
    return slot_index(normal + uv[0] * t1 + uv[1] * t2)


@lru_cache(maxsize=None)
def face_edges(face: int) -> tuple[int, ...]:
    """Edge numbers bounding ``face`` in counter-clockwise order.

    Entry ``k`` is the edge between face corners ``k`` and ``k + 1``.
    """

    return tuple(face_point_slot(face, uv) - EDGE_SLOT_OFFSET for uv in _FACE_MIDEDGES_UV)


def face_flags(edge_mask: int, face: int) -> tuple[bool, bool, bool, bool]:
    return tuple(bool((edge_mask >> edge) & 1) for edge in face_edges(face))  # type: ignore[return-value]


def face_discretization(flags: Sequence[bool]) -> list[SurfaceElement]:
    """Tessellate one cell face from its four half-edge flags.

    Without hanging edge nodes the face stays a single quadrilateral. Otherwise a
    centre node is added and the face becomes a fan of triangles: one per whole
    edge, two per halved edge.
    """

    if len(flags) != 4:
        raise ValueError(f"a face has 4 edges, got {len(flags)} flags")
    if not any(flags):
        return [SurfaceElement("quad", _FACE_CORNERS_UV)]
    centre = (0, 0)
    elements: list[SurfaceElement] = []
    for k, halved in enumerate(flags):
        start = _FACE_CORNERS_UV[k]
        end = _FACE_CORNERS_UV[(k + 1) % 4]
        if halved:
            mid = _FACE_MIDEDGES_UV[k]
            elements.append(SurfaceElement("triangle", (centre, start, mid)))
            elements.append(SurfaceElement("triangle", (centre, mid, end)))
        else:
            elements.append(SurfaceElement("triangle", (centre, start, end)))
    return elements


def face_arrangement(flags: Sequence[bool]) -> str:
    """Name of the face node arrangement, one of ``ARRANGEMENTS``."""

    count = sum(bool(f) for f in flags)
    if count == 2:
        adjacent = any(flags[k] and flags[(k + 1) % 4] for k in range(4))
        return "two_adjacent" if adjacent else "two_opposite"
    return {0: "quad", 1: "one_halved", 3: "three_halved", 4: "four_halved"}[count]


@lru_cache(maxsize=None)
def present_slots(edge_mask: int) -> tuple[int, ...]:
    """Slots carrying a node for a cell with ``edge_mask``, in slot order."""

    if not 0 <= edge_mask < 1 << N_EDGES:
        raise ValueError(f"edge mask {edge_mask} outside [0, 4095]")
    slots = list(CORNER_SLOTS)
    slots.extend(EDGE_SLOT_OFFSET + e for e in range(N_EDGES) if (edge_mask >> e) & 1)
    slots.extend(
        FACE_SLOT_OFFSET + f for f in range(6) if any(face_flags(edge_mask, f))
    )
    return tuple(slots)


@lru_cache(maxsize=None)
def cell_surface(edge_mask: int) -> tuple[tuple[int, ...], tuple[tuple[str, tuple[int, ...]], ...]]:
    """Boundary tessellation of a cell.

    Returns the present slots and, per surface element, its kind together with
    the positions of its nodes inside that slot tuple.
    """

    slots = present_slots(edge_mask)
    position = {slot: i for i, slot in enumerate(slots)}
    elements = []
    for face in range(6):
        for element in face_discretization(face_flags(edge_mask, face)):
            local = tuple(position[face_point_slot(face, uv)] for uv in element.points)
            elements.append((element.kind, local))
    return slots, tuple(elements)


def slot_coordinates(slots: Sequence[int], size: float = 1.0) -> np.ndarray:
    """Coordinates of ``slots`` relative to the centre of a cube of edge ``size``."""

    return SLOT_VECTORS[np.asarray(slots, dtype=np.int64)].astype(float) * (0.5 * size)


__all__ = [
    "ARRANGEMENTS",
    "CORNER_SLOTS",
    "CORNER_VECTORS",
    "EDGE_CORNERS",
    "EDGE_SLOT_OFFSET",
    "EDGE_VECTORS",
    "FACE_NORMALS",
    "FACE_SLOT_OFFSET",
    "N_EDGES",
    "N_SLOTS",
    "SLOT_VECTORS",
    "SurfaceElement",
    "cell_surface",
    "face_arrangement",
    "face_discretization",
    "face_edges",
    "face_flags",
    "face_frame",
    "face_point_slot",
    "present_slots",
    "slot_coordinates",
    "slot_index",
]

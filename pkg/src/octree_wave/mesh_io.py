"""Binary mesh files.

Layout (all integers little-endian):

    8 bytes   magic ``OWMESH01``
    u32       length of the JSON header in bytes
    ...       JSON header: format version, root_size, origin, materials,
              n_cells, n_nodes, numbered
    ...       cell records, ``CELL_DTYPE`` packed, one per cell
    ...       node coordinates, n_nodes x 3 float64           (numbered only)
    ...       cell node table, n_cells x 26 int64, -1 = empty  (numbered only)

Floats in the header are written with ``repr`` precision, so reading a file
and writing it again reproduces it byte for byte.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from .cell_layout import N_SLOTS
from .octree_mesh import Material, MaterialTable, MeshError, OctreeCell, OctreeMesh

logger = logging.getLogger(__name__)

MAGIC = b"OWMESH01"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")

CELL_DTYPE = np.dtype(
    [
        ("level", "u1"),
        ("index", "<u4", (3,)),
        ("origin", "<f8", (3,)),
        ("size", "<f8"),
        ("material", "<u2"),
        ("edge_mask", "<u2"),
        ("canonical_id", "u1"),
        ("transform_id", "u1"),
    ]
)


def _header(mesh: OctreeMesh) -> dict:
    return {
        "format": FORMAT_VERSION,
        "root_size": float(mesh.root_size),
        "origin": [float(c) for c in mesh.origin],
        "materials": {
            str(mid): {
                "E": mesh.materials[mid].youngs_modulus,
                "nu": mesh.materials[mid].poisson_ratio,
                "rho": mesh.materials[mid].density,
            }
            for mid in mesh.materials.ids()
        },
        "n_cells": mesh.n_cells,
        "n_nodes": mesh.n_nodes,
        "numbered": mesh.is_numbered,
    }


def _cell_records(mesh: OctreeMesh) -> np.ndarray:
    records = np.zeros(mesh.n_cells, dtype=CELL_DTYPE)
    for row, cell in zip(records, mesh.cells):
        row["level"] = cell.level
        row["index"] = cell.index
        row["origin"] = cell.origin
        row["size"] = cell.size
        row["material"] = cell.material
        row["edge_mask"] = cell.edge_mask
        row["canonical_id"] = cell.canonical_id
        row["transform_id"] = cell.transform_id
    return records


def mesh_bytes(mesh: OctreeMesh) -> bytes:
    header = json.dumps(_header(mesh), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, _LENGTH.pack(len(header)), header, _cell_records(mesh).tobytes()]
    if mesh.is_numbered:
        chunks.append(np.ascontiguousarray(mesh.nodes, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(mesh.cell_nodes, dtype="<i8").tobytes())
    return b"".join(chunks)


def save_mesh(mesh: OctreeMesh, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(mesh_bytes(mesh))
    logger.info(f"✓ Mesh saved to {path} ({mesh.n_cells} cell(s), {mesh.n_nodes} node(s))")
    return path


def _take(data: bytes, offset: int, size: int, what: str, path: Path) -> int:
    if offset + size > len(data):
        raise MeshError(f"{path}: truncated while reading {what}")
    return offset + size


def load_mesh(path: Path) -> OctreeMesh:
    path = Path(path)
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise MeshError(f"{path} is not an octree mesh file")
    offset = _take(data, len(MAGIC), _LENGTH.size, "header length", path)
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    start = offset
    offset = _take(data, offset, length, "header", path)
    try:
        header = json.loads(data[start:offset].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MeshError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format") != FORMAT_VERSION:
        raise MeshError(f"{path}: unsupported mesh format {header.get('format')!r}")

    n_cells, n_nodes = int(header["n_cells"]), int(header["n_nodes"])
    start = offset
    offset = _take(data, offset, n_cells * CELL_DTYPE.itemsize, "cell records", path)
    records = np.frombuffer(data, dtype=CELL_DTYPE, count=n_cells, offset=start)
    nodes = cell_nodes = None
    if header["numbered"]:
        start = offset
        offset = _take(data, offset, n_nodes * 24, "node coordinates", path)
        nodes = np.frombuffer(data, dtype="<f8", count=3 * n_nodes, offset=start).reshape(n_nodes, 3).astype(float)
        start = offset
        offset = _take(data, offset, n_cells * N_SLOTS * 8, "cell node table", path)
        cell_nodes = (
            np.frombuffer(data, dtype="<i8", count=n_cells * N_SLOTS, offset=start)
            .reshape(n_cells, N_SLOTS)
            .astype(np.int64)
        )
    if offset != len(data):
        raise MeshError(f"{path}: {len(data) - offset} trailing byte(s)")

    materials = MaterialTable(
        {
            int(mid): Material(float(v["E"]), float(v["nu"]), float(v["rho"]))
            for mid, v in header["materials"].items()
        }
    )
    cells = tuple(
        OctreeCell(
            level=int(r["level"]),
            index=tuple(int(c) for c in r["index"]),  # type: ignore[arg-type]
            origin=tuple(float(c) for c in r["origin"]),  # type: ignore[arg-type]
            size=float(r["size"]),
            material=int(r["material"]),
            edge_mask=int(r["edge_mask"]),
            canonical_id=int(r["canonical_id"]),
            transform_id=int(r["transform_id"]),
        )
        for r in records
    )
    mesh = OctreeMesh(
        cells=cells,
        root_size=float(header["root_size"]),
        materials=materials,
        origin=np.asarray(header["origin"], dtype=float),
        nodes=nodes,
        cell_nodes=cell_nodes,
    )
    logger.info(f"✓ Loaded mesh {path}: {mesh.n_cells} cell(s), {mesh.n_nodes} node(s)")
    return mesh


__all__ = ["CELL_DTYPE", "FORMAT_VERSION", "MAGIC", "load_mesh", "mesh_bytes", "save_mesh"]

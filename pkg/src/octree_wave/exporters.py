"""Persist meshes, fields, probe histories, timings and run summaries."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import meshio
import numpy as np

from .assembly_engine import ProbeHistory, corner_nodes
from .octree_mesh import OctreeMesh, level_histogram, pattern_histogram
from .parallel_runtime import TimingReport
from .partitioner import Partition
from .verification import ConvergenceStudy

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("t [s]", "u_x [m]", "u_y [m]", "u_z [m]", "a_x [m/s^2]", "a_y [m/s^2]", "a_z [m/s^2]")
TIMING_COLUMNS = ("N", "t_C [s]", "t_W [s]", "t_T [s]", "s", "eta")


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _corner_field(mesh: OctreeMesh, points: np.ndarray, values: np.ndarray | None) -> np.ndarray:
    if values is None:
        return np.zeros((points.size, 3))
    values = np.asarray(values, dtype=float).reshape(-1, 3)
    if len(values) == points.size:
        return values
    if len(values) == mesh.n_nodes:
        return values[points]
    raise ValueError(f"field has {len(values)} node(s); expected {points.size} corners or {mesh.n_nodes} nodes")


def export_vtk(
    mesh: OctreeMesh,
    path: Path,
    displacement: np.ndarray | None = None,
    part_labels: np.ndarray | None = None,
) -> Path:
    """Legacy ASCII VTK unstructured grid of the cell corners, written with meshio.

    ``displacement`` is given per corner node (in ``corner_nodes`` order) or per
    mesh node. Hanging nodes are not drawn.
    """

    mesh.numbered()
    points = corner_nodes(mesh)
    field = _corner_field(mesh, points, displacement)
    labels = np.zeros(mesh.n_cells, dtype=np.int64) if part_labels is None else np.asarray(part_labels)
    if labels.size != mesh.n_cells:
        raise ValueError(f"{labels.size} part label(s) for {mesh.n_cells} cell(s)")
    local = np.searchsorted(points, mesh.cell_nodes[:, :8])  # type: ignore[index]

    grid = meshio.Mesh(
        points=mesh.nodes[points],  # type: ignore[index]
        cells=[("hexahedron", local.astype(np.int64))],
        point_data={
            "displacement": field,
            "displacement_magnitude": np.linalg.norm(field, axis=1),
        },
        cell_data={
            "material": [np.asarray(mesh.material_ids(), dtype=np.int32)],
            "part": [labels.astype(np.int32)],
        },
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.write(path, file_format="vtk", binary=False)
    logger.info(f"✓ VTK written to {path} ({points.size} point(s), {mesh.n_cells} cell(s))")
    return path


def history_lines(history: ProbeHistory) -> list[str]:
    lines = [f"# probe {history.name} at node {history.node}", ",".join(HISTORY_COLUMNS)]
    for t, u, a in zip(history.times, history.displacement, history.acceleration):
        lines.append(",".join(_fmt(v) for v in (t, *u, *a)))
    return lines


def export_histories(histories: Mapping[str, ProbeHistory], directory: Path) -> list[Path]:
    """One CSV per probe, 17 significant digits."""

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, history in histories.items():
        path = directory / f"probe_{name}.csv"
        path.write_text("\n".join(history_lines(history)) + "\n", encoding="utf-8")
        written.append(path)
    logger.info(f"✓ {len(written)} probe histor{'y' if len(written) == 1 else 'ies'} written to {directory}")
    return written


def read_history(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=2, ndmin=2)
    return data[:, 0], data[:, 1:4], data[:, 4:7]


def save_results(histories: Mapping[str, ProbeHistory], path: Path) -> Path:
    """All probe histories in one ``.npz`` archive."""

    arrays: dict[str, np.ndarray] = {"names": np.array(list(histories), dtype=str)}
    for k, history in enumerate(histories.values()):
        arrays[f"node_{k}"] = np.array(history.node)
        arrays[f"times_{k}"] = history.times
        arrays[f"displacement_{k}"] = history.displacement
        arrays[f"acceleration_{k}"] = history.acceleration
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    logger.info(f"✓ Results archived to {path}")
    return path


def load_results(path: Path) -> dict[str, ProbeHistory]:
    with np.load(path) as data:
        names = [str(name) for name in data["names"]]
        return {
            name: ProbeHistory(
                name=name,
                node=int(data[f"node_{k}"]),
                times=data[f"times_{k}"],
                displacement=data[f"displacement_{k}"],
                acceleration=data[f"acceleration_{k}"],
            )
            for k, name in enumerate(names)
        }


def timing_rows(reports: Sequence[TimingReport]) -> list[list[str]]:
    rows = []
    for report in reports:
        speedup = "" if report.speedup is None else f"{report.speedup:.2f}"
        efficiency = "" if report.efficiency is None else f"{report.efficiency:.2f}"
        rows.append(
            [
                str(report.n_workers),
                f"{report.t_calc:.4f}",
                f"{report.t_wait:.4f}",
                f"{report.t_total:.4f}",
                speedup,
                efficiency,
            ]
        )
    return rows


def export_timing(reports: Sequence[TimingReport], path: Path) -> Path:
    lines = [",".join(TIMING_COLUMNS)]
    lines.extend(",".join(row) for row in timing_rows(reports))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"✓ Timing written to {path}")
    return path


def format_timing_table(reports: Sequence[TimingReport]) -> str:
    rows = [list(TIMING_COLUMNS), *timing_rows(reports)]
    widths = [max(len(row[c]) for row in rows) for c in range(len(TIMING_COLUMNS))]
    rendered = [" | ".join(cell.rjust(width) for cell, width in zip(row, widths)) for row in rows]
    rendered.insert(1, "-+-".join("-" * width for width in widths))
    return "\n".join(rendered)


def export_partition(partition: Partition, path: Path) -> Path:
    payload = {
        "n_parts": partition.n_parts,
        "method": partition.method,
        "sizes": partition.sizes.tolist(),
        "labels": partition.labels.tolist(),
        "interfaces": {f"{a}-{b}": nodes.tolist() for (a, b), nodes in partition.interfaces.items()},
        "interface_nodes": int(partition.interface_nodes.size),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    logger.info(f"✓ Partition written to {path}")
    return path


def export_convergence(study: ConvergenceStudy, path: Path) -> Path:
    keys = sorted({key for row in study.rows for key in row.extra})
    lines = [",".join(["series", "n_dof", "error", *keys])]
    for row in study.rows:
        extra = [_fmt(row.extra[key]) if key in row.extra else "" for key in keys]
        lines.append(",".join([row.label, str(row.n_dof), _fmt(row.error), *extra]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"✓ Convergence data written to {path}")
    return path


def export_series(path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> Path:
    """Columns of equal length as CSV (signal samples, spectra)."""

    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in zip(*columns))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def save_report(
    path: Path,
    mesh: OctreeMesh,
    critical_dt: float | None = None,
    notes: Mapping[str, object] | None = None,
) -> Path:
    """Plain-text summary of a mesh and, optionally, a run."""

    logger.info("Building summary report...")
    lines = ["# Octree mesh summary", ""]
    lines.append("## Mesh")
    lines.append(f"- Cells: {mesh.n_cells}")
    lines.append(f"- Nodes: {mesh.n_nodes}")
    lines.append(f"- DOFs: {mesh.n_dof}")
    lines.append(f"- Root size: {mesh.root_size:g} m")
    lines.append(f"- Volume: {mesh.volume():g} m^3")
    if critical_dt is not None:
        lines.append(f"- Critical time step: {critical_dt:.6e} s")
    lines.append("")

    lines.append("## Cells per level")
    for level, count in level_histogram(mesh).items():
        lines.append(f"- level {level}: {count}")
    lines.append("")

    if mesh.is_numbered:
        lines.append("## Elements per pattern")
        for pattern, count in pattern_histogram(mesh).items():
            lines.append(f"- pattern {pattern}: {count}")
        lines.append("")

    lines.append("## Materials")
    for mid in mesh.materials.ids():
        material = mesh.materials[mid]
        lines.append(
            f"- {mid}: E={material.youngs_modulus:g} Pa, nu={material.poisson_ratio:g}, rho={material.density:g} kg/m^3"
        )
    lines.append("")

    if notes:
        lines.append("## Run")
        for key, value in notes.items():
            lines.append(f"- {key}: {value}")
        lines.append("")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines), encoding="utf-8")
    logger.info(f"✓ Report saved ({len(lines)} lines)")
    return path


__all__ = [
    "HISTORY_COLUMNS",
    "TIMING_COLUMNS",
    "export_convergence",
    "export_histories",
    "export_partition",
    "export_series",
    "export_timing",
    "export_vtk",
    "format_timing_table",
    "history_lines",
    "load_results",
    "read_history",
    "save_report",
    "save_results",
]

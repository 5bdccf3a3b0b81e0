"""Reference solutions, error norms and convergence harnesses.

The global stiffness and mass matrices assembled here exist only to check the
element-by-element solver on small meshes; the transient solver never forms
them.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .assembly_engine import (
    BoundaryConditions,
    SolverTables,
    TransientProblem,
    TransientSolver,
    build_solver_tables,
    dirichlet_dofs,
    plane_nodes,
    pressure_load,
    probe_at,
)
from .excitation import Signal, critical_frequency, signal_eval
from .octree_mesh import Material, MaterialTable, MeshError, OctreeMesh, balance_octree, enumerate_nodes, mesh_from_cells
from .pattern_catalog import MasterCatalog
from .time_integrator import TimeSettings

logger = logging.getLogger(__name__)

CUBE_VARIANTS = ("closed_form", "elastic")
MESH_TYPES = (1, 2, 3)
MASS_KINDS = ("lumped", "consistent")
DENSE_LIMIT = 2000
BEAM_PROBE_X = (4.0, 8.0, 12.0, 16.0)


@dataclass(frozen=True)
class CubeSpec:
    """Cube with rollers on all six faces."""

    youngs_modulus: float = 1000.0
    poisson_ratio: float = 0.3
    density: float = 1.0
    length: float = 8.0

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise MeshError(f"cube edge length must be positive, got {self.length}")
        self.material()

    def material(self) -> Material:
        return Material(self.youngs_modulus, self.poisson_ratio, self.density)


def _branches(indices: tuple[int, int, int]) -> tuple[str, ...]:
    zeros = sum(1 for c in indices if c == 0)
    if zeros == 2:
        return ("dilatational",)
    if zeros == 1:
        return ("dilatational", "shear")
    return ("dilatational", "shear", "shear")


def cube_eigenfrequencies(spec: CubeSpec, count: int, variant: str = "closed_form") -> np.ndarray:
    """The ``count`` lowest angular frequencies of the roller-supported cube, ascending.

    ``closed_form`` evaluates the published expression, whose dilatational
    branch carries the modulus E/(1 - nu^2). ``elastic`` replaces that branch by
    the constrained modulus of 3D elasticity; the shear branch is identical in
    both variants and the two coincide at nu = 0.
    """

    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if variant not in CUBE_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {CUBE_VARIANTS}")
    nu = spec.poisson_ratio
    base = spec.youngs_modulus * math.pi**2 / (spec.density * (1.0 - nu**2) * spec.length**2)
    scales = {"dilatational": base, "shear": base * (1.0 - nu) / 2.0}
    if variant == "elastic":
        constrained = spec.youngs_modulus * (1.0 - nu) / ((1.0 + nu) * (1.0 - 2.0 * nu))
        scales["dilatational"] = constrained * math.pi**2 / (spec.density * spec.length**2)
    slowest = math.sqrt(min(scales.values()))

    # Every triple outside an index box of edge ``limit`` has k^2 >= (limit + 1)^2.
    limit = 1
    while True:
        values = sorted(
            math.sqrt(scales[branch] * (a * a + b * b + c * c))
            for a in range(limit + 1)
            for b in range(limit + 1)
            for c in range(limit + 1)
            if a or b or c
            for branch in _branches((a, b, c))
        )
        if len(values) >= count and values[count - 1] <= slowest * (limit + 1):
            return np.asarray(values[:count])
        limit += 1


def modal_error(numerical: Sequence[float], reference: Sequence[float]) -> float:
    """L2 norm of the relative frequency error."""

    numerical = np.asarray(numerical, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if numerical.shape != reference.shape:
        raise ValueError(f"frequency lists differ in length: {numerical.size} vs {reference.size}")
    return float(np.sqrt(np.sum((numerical - reference) ** 2) / np.sum(reference**2)))


def history_error(numerical: np.ndarray, reference: np.ndarray) -> float:
    """Relative L2 error over all probes and time steps."""

    numerical = np.asarray(numerical, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if numerical.shape != reference.shape:
        raise ValueError(f"histories differ in shape: {numerical.shape} vs {reference.shape}")
    norm = np.sum(reference**2)
    if norm == 0.0:
        raise ValueError("reference history is identically zero")
    return float(np.sqrt(np.sum((numerical - reference) ** 2) / norm))


def fitted_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or x.size != y.size:
        raise ValueError("need at least two matching points to fit a slope")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _group_material(mesh: OctreeMesh, elements: np.ndarray, attribute: str) -> np.ndarray:
    ids = mesh.material_ids()[elements]
    return np.array([getattr(mesh.materials[m], attribute) for m in ids])


def assemble_global(
    mesh: OctreeMesh, tables: SolverTables, mass: str = "lumped"
) -> tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Global stiffness and mass (lumped diagonal or consistent) as sparse matrices."""

    if mass not in MASS_KINDS:
        raise ValueError(f"unknown mass kind {mass!r}; expected one of {MASS_KINDS}")
    rows, cols, k_data, m_data = [], [], [], []
    for group in tables.groups:
        signs = group.signs
        block = signs[:, :, None] * group.master.stiffness[None] * signs[:, None, :]
        rows.append(np.repeat(group.dofs[:, :, None], group.master.n_dof, axis=2).ravel())
        cols.append(np.repeat(group.dofs[:, None, :], group.master.n_dof, axis=1).ravel())
        k_data.append((group.scale[:, None, None] * block).ravel())
        if mass == "consistent":
            sizes = mesh.sizes()[group.elements]
            weight = _group_material(mesh, group.elements, "density") * sizes**3
            consistent = signs[:, :, None] * group.master.consistent_mass[None] * signs[:, None, :]
            m_data.append((weight[:, None, None] * consistent).ravel())
    shape = (tables.n_dof, tables.n_dof)
    row, col = np.concatenate(rows), np.concatenate(cols)
    stiffness = scipy.sparse.coo_matrix((np.concatenate(k_data), (row, col)), shape=shape).tocsr()
    if mass == "consistent":
        mass_matrix = scipy.sparse.coo_matrix((np.concatenate(m_data), (row, col)), shape=shape).tocsr()
    else:
        mass_matrix = scipy.sparse.diags(tables.mass).tocsr()
    return stiffness, mass_matrix


def roller_dofs(mesh: OctreeMesh, lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
    """Normal DOFs of all nodes on the six faces of a box."""

    fixed = []
    for axis in range(3):
        for value in (lower[axis], upper[axis]):
            fixed.append(3 * plane_nodes(mesh, axis, value) + axis)
    return np.unique(np.concatenate(fixed))


def modal_frequencies(
    mesh: OctreeMesh,
    catalog: MasterCatalog,
    count: int,
    fixed: np.ndarray | None = None,
    mass: str = "lumped",
) -> np.ndarray:
    """Lowest ``count`` angular frequencies of the constrained mesh."""

    tables = build_solver_tables(mesh, catalog)
    stiffness, mass_matrix = assemble_global(mesh, tables, mass)
    free = np.setdiff1d(np.arange(tables.n_dof), np.asarray(fixed if fixed is not None else [], dtype=np.int64))
    k = stiffness[free][:, free]
    m = mass_matrix[free][:, free]
    if count > free.size:
        raise ValueError(f"requested {count} frequencies from {free.size} free DOF(s)")
    if free.size <= DENSE_LIMIT or count >= free.size - 1:
        values = scipy.linalg.eigh(k.toarray(), m.toarray(), eigvals_only=True, subset_by_index=[0, count - 1])
    else:
        values = scipy.sparse.linalg.eigsh(k.tocsc(), k=count, M=m.tocsc(), sigma=0.0, which="LM",
                                           return_eigenvectors=False)
    values = np.sort(np.real(values))
    return np.sqrt(np.clip(values, 0.0, None))


def _cube_leaves(n: int, mesh_type: int) -> tuple[int, list[tuple[int, tuple[int, int, int], int]]]:
    level = max(0, math.ceil(math.log2(n)))
    cells = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                refine = (mesh_type == 2 and i % 2 == 1) or (mesh_type == 3 and (i + j + k) % 2 == 1)
                if not refine:
                    cells.append((level, (i, j, k), 1))
                    continue
                for a in (0, 1):
                    for b in (0, 1):
                        for c in (0, 1):
                            cells.append((level + 1, (2 * i + a, 2 * j + b, 2 * k + c), 1))
    return level, cells


def cube_mesh(n: int, mesh_type: int = 1, spec: CubeSpec | None = None) -> OctreeMesh:
    """Cube of ``n`` coarse cells per edge.

    Type 1 is uniform, type 2 refines every other slab along x once, type 3
    refines the odd cells of a 3D checkerboard once.
    """

    if n < 1:
        raise MeshError(f"cube needs at least one cell per edge, got {n}")
    if mesh_type not in MESH_TYPES:
        raise MeshError(f"unknown cube mesh type {mesh_type}; expected one of {MESH_TYPES}")
    spec = spec or CubeSpec()
    level, cells = _cube_leaves(n, mesh_type)
    root_size = spec.length / n * (1 << level)
    materials = MaterialTable({1: spec.material()})
    mesh = enumerate_nodes(balance_octree(mesh_from_cells(root_size, cells, materials)))
    logger.debug(f"cube mesh n={n} type {mesh_type}: {mesh.n_cells} cell(s), {mesh.n_dof} DOF(s)")
    return mesh


@dataclass
class ConvergenceRow:
    label: str
    n_dof: int
    error: float
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class ConvergenceStudy:
    name: str
    rows: list[ConvergenceRow]

    def slope(self, label: str | None = None) -> float:
        rows = [r for r in self.rows if label is None or r.label == label]
        return fitted_slope([r.n_dof for r in rows], [r.error for r in rows])


def cube_convergence(
    sizes: Sequence[int] = (8, 12, 16),
    mesh_type: int = 1,
    count: int = 100,
    spec: CubeSpec | None = None,
    catalog: MasterCatalog | None = None,
    variant: str = "elastic",
) -> ConvergenceStudy:
    """Modal error against the cube reference for lumped and consistent mass."""

    spec = spec or CubeSpec()
    catalog = catalog or MasterCatalog()
    reference = cube_eigenfrequencies(spec, count, variant)
    rows = []
    for n in sizes:
        mesh = cube_mesh(n, mesh_type, spec)
        fixed = roller_dofs(mesh, (0.0, 0.0, 0.0), (spec.length,) * 3)
        free = mesh.n_dof - fixed.size
        for kind in MASS_KINDS:
            omega = modal_frequencies(mesh, catalog, count, fixed, kind)
            error = modal_error(omega, reference)
            rows.append(ConvergenceRow(label=kind, n_dof=free, error=error, extra={"n": float(n)}))
            logger.info(f"cube type {mesh_type}, n={n}, {kind} mass: {free} DOF(s), e={error:.4e}")
    return ConvergenceStudy(name=f"cube_type{mesh_type}", rows=rows)


def _load_function(
    signal: Signal | Callable[[float], float], max_frequency: float | None
) -> tuple[Callable[[np.ndarray], np.ndarray], float]:
    if isinstance(signal, Signal):
        f1 = max_frequency if max_frequency is not None else critical_frequency(signal)
        return (lambda t: np.asarray(signal_eval(signal, t), dtype=float)), f1
    if max_frequency is None:
        raise ValueError("a callable load history needs an explicit max_frequency")
    return (lambda t: np.asarray(np.vectorize(signal, otypes=[float])(t))), max_frequency


def beam_1d_reference(
    youngs_modulus: float,
    density: float,
    length: float,
    signal: Signal | Callable[[float], float],
    x: Sequence[float],
    t: Sequence[float],
    traction: float = 1.0,
    max_frequency: float | None = None,
    mode_factor: float = 20.0,
    samples_per_period: int = 40,
) -> tuple[np.ndarray, np.ndarray]:
    """Displacement and acceleration of a fixed-free rod under an end traction.

    The rod is fixed at x = 0 and loaded at x = length by ``traction *
    signal(t)``. Modes up to ``mode_factor * max_frequency`` are integrated
    exactly for a piecewise linear load; the displacement adds the quasi-static
    part of the truncated modes. ``t`` must be a uniform grid starting at 0.
    Returns arrays of shape (len(t), len(x)).
    """

    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.size < 2 or t[0] != 0.0:
        raise ValueError("time grid must be 1-D, start at 0 and hold at least two samples")
    step = t[1] - t[0]
    if step <= 0 or np.max(np.abs(np.diff(t) - step)) > 1e-6 * step:
        raise ValueError("time grid must be uniform")
    load, f1 = _load_function(signal, max_frequency)

    speed = math.sqrt(youngs_modulus / density)
    n_modes = max(1, int(math.floor(2.0 * mode_factor * f1 * length / speed + 0.5)))
    beta = (2.0 * np.arange(1, n_modes + 1) - 1.0) * math.pi / (2.0 * length)
    omega = speed * beta
    participation = (2.0 / (density * length)) * np.where(np.arange(n_modes) % 2 == 0, 1.0, -1.0)
    shapes = np.sin(np.outer(x, beta))

    substeps = max(1, int(math.ceil(step * samples_per_period * f1)))
    h = step / substeps
    cos_h, sin_h = np.cos(omega * h), np.sin(omega * h)
    q_sub = traction * load(np.arange((t.size - 1) * substeps + 1) * h)

    eta = np.zeros(n_modes)
    velocity = np.zeros(n_modes)
    disp = np.zeros((t.size, x.size))
    acc = np.zeros((t.size, x.size))

    def sample(row: int, q: float) -> None:
        force = participation * q
        disp[row] = q * x / youngs_modulus + shapes @ (eta - force / omega**2)
        acc[row] = shapes @ (force - omega**2 * eta)

    sample(0, float(q_sub[0]))
    w2 = omega**2
    for i in range(q_sub.size - 1):
        f0 = participation * q_sub[i]
        slope = participation * (q_sub[i + 1] - q_sub[i]) / h
        eta, velocity = (
            eta * cos_h + velocity * sin_h / omega + f0 / w2 * (1.0 - cos_h) + slope / w2 * (h - sin_h / omega),
            -eta * omega * sin_h + velocity * cos_h + f0 * sin_h / omega + slope / w2 * (1.0 - cos_h),
        )
        if (i + 1) % substeps == 0:
            sample((i + 1) // substeps, float(q_sub[i + 1]))
    logger.debug(f"rod reference: {n_modes} mode(s), {substeps} substep(s) per sample")
    return disp, acc


def beam_mesh(h: float, length: float = 16.0, width: float = 1.0, material: Material | None = None) -> OctreeMesh:
    """Uniform mesh of a ``length`` x ``width`` x ``width`` bar with cells of edge ``h``."""

    nx = length / h
    ny = width / h
    if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9 or round(ny) < 1:
        raise MeshError(f"element size {h} does not divide the bar {length} x {width}")
    nx, ny = int(round(nx)), int(round(ny))
    level = max(0, math.ceil(math.log2(nx)))
    root_size = h * (1 << level)
    material = material or Material(1.0e4, 0.0, 1.0)
    cells = [(level, (i, j, k), 1) for i in range(nx) for j in range(ny) for k in range(ny)]
    return enumerate_nodes(mesh_from_cells(root_size, cells, MaterialTable({1: material})))


def beam_problem(
    h: float,
    signal: Signal,
    duration: float,
    catalog: MasterCatalog | None = None,
    length: float = 16.0,
    width: float = 1.0,
    material: Material | None = None,
    traction: float = -1.0,
    probes_x: Sequence[float] = BEAM_PROBE_X,
    dt: float | None = None,
) -> TransientProblem:
    """Bar fixed at x = 0 with a uniform end pressure at x = ``length``."""

    mesh = beam_mesh(h, length, width, material)
    load = pressure_load(mesh, "x", length, (traction, 0.0, 0.0), signal, name="end_pressure")
    bcs = BoundaryConditions(fixed=dirichlet_dofs(mesh, "x", 0.0), loads=(load,))
    probes = tuple(probe_at(mesh, f"x{x:g}", (x, width / 2, width / 2)) for x in probes_x)
    return TransientProblem(
        mesh=mesh,
        catalog=catalog or MasterCatalog(),
        time=TimeSettings(duration=duration, dt=dt),
        bcs=bcs,
        probes=probes,
    )


def beam_convergence(
    sizes: Sequence[float] = (0.5, 0.25, 0.125),
    t1: float = 0.015,
    duration: float = 0.24,
    catalog: MasterCatalog | None = None,
    material: Material | None = None,
) -> ConvergenceStudy:
    """History error of the bar at the probe points against the rod reference."""

    material = material or Material(1.0e4, 0.0, 1.0)
    catalog = catalog or MasterCatalog()
    signal = Signal("ricker", t1)
    rows = []
    for h in sizes:
        problem = beam_problem(h, signal, duration, catalog, material=material)
        result = TransientSolver(problem).run()
        names = [p.name for p in problem.probes]
        times = result.histories[names[0]].times
        num_u = np.stack([result.histories[n].displacement[:, 0] for n in names], axis=1)
        num_a = np.stack([result.histories[n].acceleration[:, 0] for n in names], axis=1)
        ref_u, ref_a = beam_1d_reference(
            material.youngs_modulus, material.density, 16.0, signal, BEAM_PROBE_X, times, traction=-1.0
        )
        err_u = history_error(num_u, ref_u)
        err_a = history_error(num_a, ref_a)
        n_dof = problem.mesh.n_dof
        rows.append(ConvergenceRow("displacement", n_dof, err_u, {"h": h, "dt": result.dt}))
        rows.append(ConvergenceRow("acceleration", n_dof, err_a, {"h": h, "dt": result.dt}))
        logger.info(f"beam h={h:g}: {n_dof} DOF(s), dt={result.dt:.4e} s, e_u={err_u:.4e}, e_a={err_a:.4e}")
    return ConvergenceStudy(name="beam", rows=rows)


__all__ = [
    "BEAM_PROBE_X",
    "CUBE_VARIANTS",
    "ConvergenceRow",
    "ConvergenceStudy",
    "CubeSpec",
    "MASS_KINDS",
    "MESH_TYPES",
    "assemble_global",
    "beam_1d_reference",
    "beam_convergence",
    "beam_mesh",
    "beam_problem",
    "cube_convergence",
    "cube_eigenfrequencies",
    "cube_mesh",
    "fitted_slope",
    "history_error",
    "modal_error",
    "modal_frequencies",
    "roller_dofs",
]

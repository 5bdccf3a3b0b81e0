"""Element-by-element internal forces, boundary conditions and the serial driver.

Elements sharing a master cell are evaluated together: their signed nodal
displacements are gathered into one block, multiplied by the master stiffness
and scaled per element by ``E * L``. Contributions are always summed into the
global vector in ascending element order, so results do not depend on how
elements are grouped or split across workers.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cell_layout import FACE_NORMALS
from .excitation import Signal, signal_eval
from .octree_mesh import CellIndex, MeshError, OctreeMesh, face_nodes
from .pattern_catalog import MasterCatalog, MasterCell, element_dofs, nu_key
from .sbfem_kernel import QUAD_RULE, TRIANGLE_RULE, shape_eval
from .time_integrator import (
    DivergenceMonitor,
    StateTriplet,
    TimeSettings,
    cdm_step,
    critical_time_step,
    init_history,
    initial_acceleration,
)

logger = logging.getLogger(__name__)

AXES = {"x": 0, "y": 1, "z": 2}


class AssemblyError(ValueError):
    """Raised when solver tables or boundary conditions cannot be built."""


@dataclass(frozen=True, eq=False)
class PatternGroup:
    """Elements sharing one master cell.

    Rows of ``dofs``/``signs``/``flat_index`` follow ``elements`` (ascending);
    columns follow the master DOF order.
    """

    canonical_id: int
    poisson_ratio: float
    master: MasterCell
    elements: np.ndarray
    dofs: np.ndarray
    signs: np.ndarray
    scale: np.ndarray
    flat_index: np.ndarray

    @property
    def n_elements(self) -> int:
        return int(self.elements.size)

    @property
    def key(self) -> tuple[int, int]:
        return self.canonical_id, nu_key(self.poisson_ratio)


@dataclass(frozen=True, eq=False)
class SolverTables:
    """Everything the force loop needs, in one DOF numbering.

    ``flat_dofs`` lists the target DOF of every element contribution, ordered
    by element then master DOF; ``element_offsets[k]`` is where element
    ``elements[k]`` starts in that list.
    """

    groups: tuple[PatternGroup, ...]
    mass: np.ndarray
    n_dof: int
    elements: np.ndarray
    element_offsets: np.ndarray
    flat_dofs: np.ndarray

    @property
    def n_elements(self) -> int:
        return int(self.elements.size)

    @property
    def n_contributions(self) -> int:
        return int(self.flat_dofs.size)


def build_solver_tables(mesh: OctreeMesh, catalog: MasterCatalog) -> SolverTables:
    """Group elements by (pattern, Poisson ratio) and assemble the lumped mass."""

    mesh.numbered()
    members: dict[tuple[int, int], list[int]] = {}
    ratios: dict[tuple[int, int], float] = {}
    for e, cell in enumerate(mesh.cells):
        try:
            material = mesh.materials[cell.material]
        except MeshError as exc:
            raise AssemblyError(f"element {e}: {exc}") from exc
        if cell.canonical_id < 1:
            raise AssemblyError(f"element {e} has no pattern; enumerate the mesh nodes first")
        key = (cell.canonical_id, nu_key(material.poisson_ratio))
        members.setdefault(key, []).append(e)
        ratios[key] = material.poisson_ratio

    masters = {key: catalog.get(key[0], ratios[key]) for key in members}
    counts = np.empty(mesh.n_cells, dtype=np.int64)
    for key, elements in members.items():
        counts[elements] = masters[key].n_dof
    offsets = np.concatenate([[0], np.cumsum(counts)])
    flat_dofs = np.empty(int(offsets[-1]), dtype=np.int64)
    flat_mass = np.empty(int(offsets[-1]))

    transform_ids = np.array([cell.transform_id for cell in mesh.cells], dtype=np.int64)
    sizes = mesh.sizes()
    material_ids = mesh.material_ids()
    groups = []
    for key in sorted(members):
        master = masters[key]
        elements = np.asarray(members[key], dtype=np.int64)
        dofs = np.empty((elements.size, master.n_dof), dtype=np.int64)
        signs = np.empty((elements.size, master.n_dof))
        tids = transform_ids[elements]
        for tid in np.unique(tids):
            rows = np.flatnonzero(tids == tid)
            block, block_signs = element_dofs(mesh.cell_nodes[elements[rows]], key[0], int(tid))
            dofs[rows] = block
            signs[rows] = block_signs
        if np.any(dofs < 0):
            bad = int(elements[np.flatnonzero((dofs < 0).any(axis=1))[0]])
            raise AssemblyError(f"element {bad}: pattern {key[0]} needs a node the mesh does not have")
        youngs = np.array([mesh.materials[m].youngs_modulus for m in material_ids[elements]])
        density = np.array([mesh.materials[m].density for m in material_ids[elements]])
        length = sizes[elements]
        flat_index = offsets[elements][:, None] + np.arange(master.n_dof)
        flat_dofs[flat_index] = dofs
        flat_mass[flat_index] = (density * length**3)[:, None] * master.lumped_mass[None, :]
        groups.append(
            PatternGroup(
                canonical_id=key[0],
                poisson_ratio=ratios[key],
                master=master,
                elements=elements,
                dofs=dofs,
                signs=signs,
                scale=youngs * length,
                flat_index=flat_index,
            )
        )

    mass = np.bincount(flat_dofs, weights=flat_mass, minlength=mesh.n_dof)
    if np.any(mass <= 0.0):
        missing = np.flatnonzero(mass <= 0.0)
        raise AssemblyError(f"{missing.size} DOF(s) carry no mass (first: {int(missing[0])})")
    logger.info(
        f"✓ Solver tables: {mesh.n_cells} element(s) in {len(groups)} pattern group(s), {mesh.n_dof} DOF(s)"
    )
    return SolverTables(
        groups=tuple(groups),
        mass=mass,
        n_dof=mesh.n_dof,
        elements=np.arange(mesh.n_cells, dtype=np.int64),
        element_offsets=offsets,
        flat_dofs=flat_dofs,
    )


def restrict_tables(tables: SolverTables, elements: np.ndarray) -> tuple[SolverTables, np.ndarray, np.ndarray]:
    """Tables for a subset of elements in a compact local DOF numbering.

    Returns the local tables, the DOFs (in the parent numbering) they cover and
    the positions of their contributions in the parent's ``flat_dofs``.
    The lumped mass is sliced from the parent, not re-summed.
    """

    elements = np.unique(np.asarray(elements, dtype=np.int64))
    positions = np.searchsorted(tables.elements, elements)
    if elements.size == 0:
        raise AssemblyError("element subset is empty")
    if positions[-1] >= tables.n_elements or np.any(tables.elements[positions] != elements):
        raise AssemblyError("element subset references elements outside the tables")
    starts = tables.element_offsets[positions]
    counts = tables.element_offsets[positions + 1] - starts
    offsets = np.concatenate([[0], np.cumsum(counts)])
    flat_positions = np.repeat(starts - offsets[:-1], counts) + np.arange(int(offsets[-1]))
    dofs = np.unique(tables.flat_dofs[flat_positions])

    groups = []
    for group in tables.groups:
        mask = np.isin(group.elements, elements)
        if not np.any(mask):
            continue
        members = group.elements[mask]
        local = np.searchsorted(elements, members)
        groups.append(
            PatternGroup(
                canonical_id=group.canonical_id,
                poisson_ratio=group.poisson_ratio,
                master=group.master,
                elements=members,
                dofs=np.searchsorted(dofs, group.dofs[mask]),
                signs=group.signs[mask],
                scale=group.scale[mask],
                flat_index=offsets[local][:, None] + np.arange(group.master.n_dof),
            )
        )
    local_tables = SolverTables(
        groups=tuple(groups),
        mass=tables.mass[dofs],
        n_dof=int(dofs.size),
        elements=elements,
        element_offsets=offsets,
        flat_dofs=np.searchsorted(dofs, tables.flat_dofs[flat_positions]),
    )
    return local_tables, dofs, flat_positions


def _ordered_product(stiffness: np.ndarray, gathered: np.ndarray) -> np.ndarray:
    # Each row accumulates over master DOFs in a fixed order, independent of the other rows.
    out = np.zeros_like(gathered)
    for j in range(stiffness.shape[0]):
        out += gathered[:, j, None] * stiffness[None, j, :]
    return out


def element_forces(tables: SolverTables, displacement: np.ndarray, ordered: bool = True) -> np.ndarray:
    """Element force contributions laid out like ``tables.flat_dofs``."""

    values = np.empty(tables.n_contributions)
    for group in tables.groups:
        gathered = group.signs * displacement[group.dofs]
        if ordered:
            forces = _ordered_product(group.master.stiffness, gathered)
        else:
            forces = gathered @ group.master.stiffness
        forces *= group.scale[:, None]
        forces *= group.signs
        values[group.flat_index] = forces
    return values


def reduce_forces(tables: SolverTables, values: np.ndarray) -> np.ndarray:
    return np.bincount(tables.flat_dofs, weights=values, minlength=tables.n_dof)


def internal_force(tables: SolverTables, displacement: np.ndarray, ordered: bool = True) -> np.ndarray:
    """R_int = K U without forming K."""

    return reduce_forces(tables, element_forces(tables, displacement, ordered))


@dataclass(frozen=True, eq=False)
class NeumannLoad:
    """Nodal force amplitudes modulated in time by ``signal``."""

    dofs: np.ndarray
    amplitudes: np.ndarray
    signal: Signal
    name: str = "load"

    def __post_init__(self) -> None:
        if np.shape(self.dofs) != np.shape(self.amplitudes) or np.ndim(self.dofs) != 1:
            raise AssemblyError(f"{self.name}: dofs and amplitudes must be matching 1-D arrays")


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    """Homogeneous Dirichlet DOFs and time-dependent Neumann loads."""

    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    loads: tuple[NeumannLoad, ...] = ()

    def validate(self, n_dof: int) -> None:
        fixed = np.asarray(self.fixed, dtype=np.int64)
        if fixed.size and (fixed.min() < 0 or fixed.max() >= n_dof):
            raise AssemblyError(f"fixed DOF outside [0, {n_dof})")
        for load in self.loads:
            if load.dofs.size and (load.dofs.min() < 0 or load.dofs.max() >= n_dof):
                raise AssemblyError(f"{load.name}: DOF outside [0, {n_dof})")
            loaded = load.dofs[load.amplitudes != 0.0]
            clash = np.intersect1d(loaded, fixed)
            if clash.size:
                raise AssemblyError(f"{load.name}: {clash.size} loaded DOF(s) are also fixed (first: {int(clash[0])})")

    def amplitude_matrix(self, n_dof: int) -> np.ndarray:
        matrix = np.zeros((len(self.loads), n_dof))
        for row, load in enumerate(self.loads):
            matrix[row] = np.bincount(load.dofs, weights=load.amplitudes, minlength=n_dof)
        return matrix

    @property
    def signals(self) -> tuple[Signal, ...]:
        return tuple(load.signal for load in self.loads)


def add_loads(force: np.ndarray, amplitudes: np.ndarray, signals: Sequence[Signal], t: float) -> np.ndarray:
    """Add the Neumann loads at time ``t`` to ``force`` in place."""

    for row, signal in zip(amplitudes, signals):
        force += row * signal_eval(signal, t)
    return force


def zero_fixed(displacement: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Zero the Dirichlet DOFs of ``displacement`` in place."""

    displacement[fixed] = 0.0
    return displacement


def external_force(amplitudes: np.ndarray, signals: Sequence[Signal], t: float) -> np.ndarray:
    return add_loads(np.zeros(amplitudes.shape[1]), amplitudes, signals, t)


def apply_bcs(
    force: np.ndarray, displacement: np.ndarray, bcs: BoundaryConditions, t: float
) -> tuple[np.ndarray, np.ndarray]:
    """``force`` with the Neumann loads at ``t`` added and ``displacement`` with its fixed DOFs zeroed.

    The transient solver applies the same ``add_loads`` and ``zero_fixed`` steps
    to its local arrays in place.
    """

    loaded = add_loads(np.array(force, dtype=float), bcs.amplitude_matrix(displacement.size), bcs.signals, t)
    constrained = zero_fixed(displacement.copy(), np.asarray(bcs.fixed, dtype=np.int64))
    return loaded, constrained


def _axis(axis: int | str) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise AssemblyError(f"unknown axis {axis!r}")
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise AssemblyError(f"unknown axis {axis!r}")
    return int(axis)


def _tolerance(mesh: OctreeMesh) -> float:
    return 1e-9 * mesh.root_size


def plane_nodes(mesh: OctreeMesh, axis: int | str, value: float) -> np.ndarray:
    mesh.numbered()
    column = mesh.nodes[:, _axis(axis)]  # type: ignore[index]
    return np.flatnonzero(np.abs(column - value) <= _tolerance(mesh))


def dirichlet_dofs(
    mesh: OctreeMesh, axis: int | str, value: float, components: Sequence[int | str] = (0, 1, 2)
) -> np.ndarray:
    nodes = plane_nodes(mesh, axis, value)
    if nodes.size == 0:
        raise AssemblyError(f"no nodes on the plane {axis} = {value}")
    comps = np.array([_axis(c) for c in components], dtype=np.int64)
    return np.unique((3 * nodes[:, None] + comps[None, :]).ravel())


def nearest_node(mesh: OctreeMesh, point: Sequence[float]) -> int:
    mesh.numbered()
    distance = np.linalg.norm(mesh.nodes - np.asarray(point, dtype=float), axis=1)  # type: ignore[operator]
    return int(np.argmin(distance))


def surface_shape_integrals(kind: str, coords: np.ndarray) -> np.ndarray:
    """Integral of each shape function over one flat surface element."""

    points, weights = QUAD_RULE if kind == "quad" else TRIANGLE_RULE
    coords = np.asarray(coords, dtype=float)
    total = np.zeros(len(coords))
    for (eta, zeta), weight in zip(points, weights):
        n, n_eta, n_zeta = shape_eval(kind, eta, zeta)
        area = np.linalg.norm(np.cross(n_eta @ coords, n_zeta @ coords))
        total += weight * area * n
    return total


def pressure_load(
    mesh: OctreeMesh,
    axis: int | str,
    value: float,
    traction: Sequence[float],
    signal: Signal,
    name: str = "pressure",
) -> NeumannLoad:
    """Consistent nodal loads of a uniform traction on exposed faces lying on a plane."""

    mesh.numbered()
    ax = _axis(axis)
    tol = _tolerance(mesh)
    nodes, weights = [], []
    for element, face in CellIndex(mesh).exposed_faces():
        normal = FACE_NORMALS[face]
        if normal[ax] == 0:
            continue
        cell = mesh.cells[element]
        coordinate = cell.origin[ax] + (cell.size if normal[ax] > 0 else 0.0)
        if abs(coordinate - value) > tol:
            continue
        for kind, ids in face_nodes(mesh, element, face):
            nodes.append(ids)
            weights.append(surface_shape_integrals(kind, mesh.nodes[ids]))  # type: ignore[index]
    if not nodes:
        raise AssemblyError(f"{name}: no exposed faces on the plane {axis} = {value}")
    node_ids = np.concatenate(nodes)
    integrals = np.concatenate(weights)
    vector = np.asarray(traction, dtype=float)
    dofs = (3 * node_ids[:, None] + np.arange(3)).ravel()
    amplitudes = (integrals[:, None] * vector[None, :]).ravel()
    keep = amplitudes != 0.0
    return NeumannLoad(dofs=dofs[keep], amplitudes=amplitudes[keep], signal=signal, name=name)


def nodal_load(
    mesh: OctreeMesh,
    force: Sequence[float],
    signal: Signal,
    node: int | None = None,
    point: Sequence[float] | None = None,
    name: str = "nodal",
) -> NeumannLoad:
    if (node is None) == (point is None):
        raise AssemblyError(f"{name}: give exactly one of node or point")
    target = nearest_node(mesh, point) if point is not None else int(node)  # type: ignore[arg-type]
    if not 0 <= target < mesh.n_nodes:
        raise AssemblyError(f"{name}: node {target} outside the mesh")
    vector = np.asarray(force, dtype=float)
    dofs = 3 * target + np.arange(3)
    keep = vector != 0.0
    return NeumannLoad(dofs=dofs[keep], amplitudes=vector[keep], signal=signal, name=name)


@dataclass(frozen=True, eq=False)
class InitialConditions:
    displacement: np.ndarray | None = None
    velocity: np.ndarray | None = None

    @classmethod
    def uniform(
        cls, n_dof: int, displacement: Sequence[float] = (0.0, 0.0, 0.0), velocity: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "InitialConditions":
        n_nodes = n_dof // 3
        return cls(
            displacement=np.tile(np.asarray(displacement, dtype=float), n_nodes),
            velocity=np.tile(np.asarray(velocity, dtype=float), n_nodes),
        )

    def vectors(self, n_dof: int) -> tuple[np.ndarray, np.ndarray]:
        result = []
        for label, vector in (("displacement", self.displacement), ("velocity", self.velocity)):
            if vector is None:
                result.append(np.zeros(n_dof))
                continue
            array = np.array(vector, dtype=float)
            if array.shape != (n_dof,):
                raise AssemblyError(f"initial {label} has shape {array.shape}, expected ({n_dof},)")
            result.append(array)
        return result[0], result[1]


@dataclass(frozen=True)
class Probe:
    name: str
    node: int


def probe_at(mesh: OctreeMesh, name: str, point: Sequence[float]) -> Probe:
    return Probe(name=name, node=nearest_node(mesh, point))


@dataclass
class ProbeHistory:
    name: str
    node: int
    times: np.ndarray
    displacement: np.ndarray
    acceleration: np.ndarray


@dataclass
class Snapshot:
    step: int
    time: float
    displacement: np.ndarray


@dataclass
class SolverState:
    """Step ``step`` is the next one to evaluate; ``current`` is U at that step."""

    step: int
    previous: np.ndarray
    current: np.ndarray

    def copy(self) -> "SolverState":
        return SolverState(self.step, self.previous.copy(), self.current.copy())


def corner_nodes(mesh: OctreeMesh) -> np.ndarray:
    return np.unique(mesh.numbered().cell_nodes[:, :8])  # type: ignore[index]


def momentum(mass: np.ndarray, previous: np.ndarray, current: np.ndarray, dt: float) -> np.ndarray:
    """Total momentum per direction from the backward velocity."""

    return (mass * (current - previous) / dt).reshape(-1, 3).sum(axis=0)


@dataclass(eq=False)
class LocalSystem:
    """One worker's view of the problem (the whole problem when run serially)."""

    tables: SolverTables
    dofs: np.ndarray
    fixed: np.ndarray
    amplitudes: np.ndarray
    signals: tuple[Signal, ...]
    dt: float
    alpha: float = 0.0
    ordered: bool = True

    def external_force(self, t: float) -> np.ndarray:
        return external_force(self.amplitudes, self.signals, t)

    def constrain(self, displacement: np.ndarray) -> np.ndarray:
        return zero_fixed(displacement, self.fixed)


class HistoryRecorder:
    """Collects probe rows and snapshots for a set of local DOF positions."""

    def __init__(
        self,
        probes: Sequence[Probe],
        probe_positions: np.ndarray,
        history_every: int,
        snapshot_positions: np.ndarray | None = None,
        snapshot_every: int = 0,
        dt: float = 1.0,
        mass: np.ndarray | None = None,
    ) -> None:
        if history_every < 1:
            raise AssemblyError(f"history cadence must be >= 1, got {history_every}")
        self.probes = list(probes)
        self.probe_positions = np.asarray(probe_positions, dtype=np.int64).reshape(len(self.probes), 3)
        self.history_every = history_every
        self.snapshot_positions = snapshot_positions
        self.snapshot_every = snapshot_every
        self.dt = dt
        self.mass = mass
        self.times: list[float] = []
        self.displacement: list[np.ndarray] = []
        self.acceleration: list[np.ndarray] = []
        self.momentum: list[np.ndarray] = []
        self.snapshots: list[Snapshot] = []

    def record(self, step: int, state: StateTriplet) -> None:
        t = step * self.dt
        if step % self.history_every == 0:
            positions = self.probe_positions
            self.times.append(t)
            self.displacement.append(state.current[positions].copy())
            self.acceleration.append(
                (state.next[positions] - 2.0 * state.current[positions] + state.previous[positions]) / (self.dt * self.dt)
            )
            if self.mass is not None:
                self.momentum.append(momentum(self.mass, state.previous, state.current, self.dt))
        if self.snapshot_every and self.snapshot_positions is not None and step % self.snapshot_every == 0:
            self.snapshots.append(Snapshot(step, t, state.current[self.snapshot_positions].reshape(-1, 3).copy()))

    def histories(self) -> dict[str, ProbeHistory]:
        times = np.asarray(self.times)
        rows = len(self.times)
        disp = np.asarray(self.displacement).reshape(rows, len(self.probes), 3)
        acc = np.asarray(self.acceleration).reshape(rows, len(self.probes), 3)
        return {
            probe.name: ProbeHistory(probe.name, probe.node, times.copy(), disp[:, k, :].copy(), acc[:, k, :].copy())
            for k, probe in enumerate(self.probes)
        }


SyncHook = Callable[[int, np.ndarray, np.ndarray], None]


class Stepper:
    """Split form of one time step: ``forces`` then ``advance``.

    Serial runs and every parallel worker step through this class, so they
    perform the same floating-point operations on each DOF.
    """

    def __init__(
        self,
        system: LocalSystem,
        state: SolverState,
        recorder: HistoryRecorder | None = None,
        monitor: DivergenceMonitor | None = None,
        log_every: int = 0,
    ) -> None:
        self.system = system
        self.step = state.step
        self.triplet = StateTriplet(state.previous.copy(), state.current.copy(), np.empty_like(state.current))
        self.recorder = recorder
        self.monitor = monitor
        self.log_every = log_every

    def forces(self) -> tuple[np.ndarray, np.ndarray]:
        values = element_forces(self.system.tables, self.triplet.current, self.system.ordered)
        return values, reduce_forces(self.system.tables, values)

    def advance(self, internal: np.ndarray) -> None:
        system, triplet, step = self.system, self.triplet, self.step
        external = system.external_force(step * system.dt)
        cdm_step(
            triplet.previous,
            triplet.current,
            external,
            internal,
            system.tables.mass,
            system.alpha,
            system.dt,
            out=triplet.next,
            step=step,
        )
        system.constrain(triplet.next)
        if self.monitor is not None:
            self.monitor.check(triplet.next, step)
        if self.recorder is not None:
            self.recorder.record(step, triplet)
        if self.log_every and step % self.log_every == 0:
            logger.debug(f"step {step}: max |u| = {np.max(np.abs(triplet.next), initial=0.0):.4e}")
        triplet.rotate()
        self.step += 1

    def state(self) -> SolverState:
        return SolverState(self.step, self.triplet.previous.copy(), self.triplet.current.copy())


def march(
    system: LocalSystem,
    state: SolverState,
    stop: int,
    sync: SyncHook | None = None,
    recorder: HistoryRecorder | None = None,
    monitor: DivergenceMonitor | None = None,
    log_every: int = 0,
) -> SolverState:
    """Evaluate steps ``state.step`` .. ``stop - 1``.

    ``sync(step, contributions, internal)`` may overwrite entries of the
    internal force before the update; workers use it for interface sums.
    """

    stepper = Stepper(system, state, recorder, monitor, log_every)
    while stepper.step < stop:
        values, internal = stepper.forces()
        if sync is not None:
            sync(stepper.step, values, internal)
        stepper.advance(internal)
    return stepper.state()


@dataclass(eq=False)
class TransientProblem:
    mesh: OctreeMesh
    catalog: MasterCatalog
    time: TimeSettings
    bcs: BoundaryConditions = field(default_factory=BoundaryConditions)
    probes: tuple[Probe, ...] = ()
    initial: InitialConditions = field(default_factory=InitialConditions)
    history_every: int = 1
    snapshot_every: int = 0
    ordered: bool = True
    log_every: int = 0


@dataclass
class TransientResult:
    histories: dict[str, ProbeHistory]
    snapshots: list[Snapshot]
    state: SolverState
    dt: float
    n_steps: int
    corner_nodes: np.ndarray
    wall_time: float = 0.0
    momentum: np.ndarray | None = None


class TransientSolver:
    """Prepared serial solver; ``run`` can be called repeatedly to chain segments."""

    def __init__(self, problem: TransientProblem) -> None:
        mesh = problem.mesh.numbered()
        self.problem = problem
        self.tables = build_solver_tables(mesh, problem.catalog)
        problem.bcs.validate(mesh.n_dof)
        for probe in problem.probes:
            if not 0 <= probe.node < mesh.n_nodes:
                raise AssemblyError(f"probe {probe.name!r}: node {probe.node} outside the mesh")
        self.fixed = np.unique(np.asarray(problem.bcs.fixed, dtype=np.int64))
        self.critical_dt = critical_time_step(mesh, problem.catalog)
        self.dt = problem.time.resolve(self.critical_dt)
        self.n_steps = problem.time.step_count(self.dt)
        self.amplitudes = problem.bcs.amplitude_matrix(mesh.n_dof)
        self.corner_nodes = corner_nodes(mesh)

    @property
    def n_dof(self) -> int:
        return self.tables.n_dof

    def system(self) -> LocalSystem:
        return LocalSystem(
            tables=self.tables,
            dofs=np.arange(self.n_dof, dtype=np.int64),
            fixed=self.fixed,
            amplitudes=self.amplitudes,
            signals=self.problem.bcs.signals,
            dt=self.dt,
            alpha=self.problem.time.alpha,
            ordered=self.problem.ordered,
        )

    def initial_state(self) -> SolverState:
        u0, v0 = self.problem.initial.vectors(self.n_dof)
        zero_fixed(u0, self.fixed)
        zero_fixed(v0, self.fixed)
        internal = internal_force(self.tables, u0, self.problem.ordered)
        external = external_force(self.amplitudes, self.problem.bcs.signals, 0.0)
        a0 = initial_acceleration(self.tables.mass, external, internal, v0, self.problem.time.alpha)
        previous = init_history(u0, v0, a0, self.dt)
        zero_fixed(previous, self.fixed)
        return SolverState(0, previous, u0)

    def load_scale(self, state: SolverState) -> float:
        peak_load = 0.0
        for row, signal in zip(self.amplitudes, self.problem.bcs.signals):
            peak_load = max(peak_load, float(np.max(np.abs(row), initial=0.0)) * abs(signal.amplitude))
        velocity = np.abs(state.current - state.previous).max(initial=0.0)
        return max(
            float(np.abs(state.current).max(initial=0.0)),
            float(velocity),
            self.dt * self.dt * peak_load / float(self.tables.mass.min()),
        )

    def probe_positions(self, dofs: np.ndarray | None = None) -> np.ndarray:
        nodes = np.array([probe.node for probe in self.problem.probes], dtype=np.int64)
        global_dofs = 3 * nodes[:, None] + np.arange(3)
        if dofs is None:
            return global_dofs
        return np.searchsorted(dofs, global_dofs)

    def snapshot_positions(self) -> np.ndarray:
        return (3 * self.corner_nodes[:, None] + np.arange(3)).ravel()

    def run(self, state: SolverState | None = None, n_steps: int | None = None) -> TransientResult:
        """Evaluate ``n_steps`` steps from ``state`` (default: the whole run from t = 0)."""

        state = self.initial_state() if state is None else state
        stop = self.n_steps + 1 if n_steps is None else state.step + n_steps
        recorder = HistoryRecorder(
            self.problem.probes,
            self.probe_positions(),
            self.problem.history_every,
            self.snapshot_positions(),
            self.problem.snapshot_every,
            self.dt,
            mass=self.tables.mass,
        )
        monitor = DivergenceMonitor(self.load_scale(state))
        logger.info(
            f"Running {stop - state.step} step(s) of dt={self.dt:.4e} s on {self.n_dof} DOF(s), "
            f"{self.tables.n_elements} element(s), {len(self.tables.groups)} group(s)"
        )
        started = time.perf_counter()
        final = march(self.system(), state, stop, recorder=recorder, monitor=monitor, log_every=self.problem.log_every)
        wall = time.perf_counter() - started
        logger.info(f"✓ Transient run finished in {wall:.2f} s")
        return TransientResult(
            histories=recorder.histories(),
            snapshots=recorder.snapshots,
            state=final,
            dt=self.dt,
            n_steps=self.n_steps,
            corner_nodes=self.corner_nodes,
            wall_time=wall,
            momentum=np.asarray(recorder.momentum).reshape(-1, 3),
        )


def run_transient(problem: TransientProblem, state: SolverState | None = None, n_steps: int | None = None) -> TransientResult:
    return TransientSolver(problem).run(state, n_steps)


__all__ = [
    "AXES",
    "AssemblyError",
    "BoundaryConditions",
    "HistoryRecorder",
    "InitialConditions",
    "LocalSystem",
    "NeumannLoad",
    "PatternGroup",
    "Probe",
    "ProbeHistory",
    "Snapshot",
    "SolverState",
    "SolverTables",
    "Stepper",
    "TransientProblem",
    "TransientResult",
    "TransientSolver",
    "add_loads",
    "apply_bcs",
    "build_solver_tables",
    "corner_nodes",
    "dirichlet_dofs",
    "element_forces",
    "external_force",
    "internal_force",
    "march",
    "momentum",
    "nearest_node",
    "nodal_load",
    "plane_nodes",
    "pressure_load",
    "probe_at",
    "reduce_forces",
    "restrict_tables",
    "surface_shape_integrals",
    "zero_fixed",
]

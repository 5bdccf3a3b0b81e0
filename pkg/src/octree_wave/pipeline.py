"""Turn a validated RunConfig into a mesh, a master catalog and a transient problem."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .assembly_engine import (
    BoundaryConditions,
    InitialConditions,
    Probe,
    TransientProblem,
    dirichlet_dofs,
    nodal_load,
    pressure_load,
    probe_at,
)
from .config import RunConfig, default_cache
from .excitation import Signal
from .mesh_io import load_mesh
from .octree_mesh import (
    Box,
    BuildCriteria,
    MaterialTable,
    OctreeMesh,
    PrimitiveSet,
    Sphere,
    VoxelGrid,
    balance_octree,
    build_octree,
    enumerate_nodes,
)
from .pattern_catalog import MasterCatalog
from .time_integrator import TimeSettings

logger = logging.getLogger(__name__)


def material_table(config: RunConfig) -> MaterialTable:
    return MaterialTable.from_mapping(config.materials)


def build_mesh(config: RunConfig) -> OctreeMesh:
    """Load or generate the octree, then balance and number it."""

    if config.mesh.path is not None:
        mesh = load_mesh(config.mesh.path)
    else:
        geo = config.mesh.geometry
        assert geo is not None
        if geo.voxels is not None:
            geometry: VoxelGrid | PrimitiveSet = VoxelGrid.from_npy(geo.voxels.path, geo.voxels.spacing, geo.voxels.origin)
        else:
            shapes = tuple(
                Box(p.lower, p.upper, p.material) if p.kind == "box" else Sphere(p.center, p.radius, p.material)  # type: ignore[arg-type]
                for p in geo.primitives
            )
            geometry = PrimitiveSet(geo.root_size, shapes, geo.origin)
        criteria = BuildCriteria(
            max_level=geo.max_level,
            min_level=geo.min_level,
            homogeneity=geo.homogeneity,
            refine_boundary=geo.refine_boundary,
        )
        mesh = build_octree(geometry, criteria, material_table(config))
    if mesh.is_numbered:
        return mesh
    return enumerate_nodes(balance_octree(mesh))


def load_catalog(cache: Path | None = None) -> MasterCatalog:
    """Cached master cells when a cache file exists; missing entries are built on demand."""

    cache = cache if cache is not None else default_cache()
    if cache is not None and Path(cache).is_file():
        return MasterCatalog.load(Path(cache))
    if cache is not None:
        logger.warning(f"Master-cell cache {cache} not found; building cells on demand")
    return MasterCatalog()


def build_problem(config: RunConfig, mesh: OctreeMesh, catalog: MasterCatalog, log_every: int = 0) -> TransientProblem:
    mesh = mesh.numbered()
    signals = {
        name: Signal(kind=s.kind, t1=s.t1, amplitude=s.amplitude, cycles=s.cycles) for name, s in config.signals.items()
    }
    fixed = [np.zeros(0, dtype=np.int64)]
    for bc in config.dirichlet:
        fixed.append(dirichlet_dofs(mesh, bc.axis, bc.value, bc.components))
    loads = []
    for load in config.neumann:
        if load.kind == "pressure":
            loads.append(
                pressure_load(mesh, load.axis, load.value, load.traction, signals[load.signal], name=load.name)  # type: ignore[arg-type]
            )
        else:
            loads.append(
                nodal_load(mesh, load.force, signals[load.signal], node=load.node, point=load.point, name=load.name)  # type: ignore[arg-type]
            )
    bcs = BoundaryConditions(fixed=np.unique(np.concatenate(fixed)), loads=tuple(loads))

    probes = tuple(
        probe_at(mesh, p.name, p.point) if p.point is not None else Probe(name=p.name, node=int(p.node))  # type: ignore[arg-type]
        for p in config.probes
    )
    if config.initial_displacement is not None or config.initial_velocity is not None:
        initial = InitialConditions.uniform(
            mesh.n_dof,
            displacement=config.initial_displacement or (0.0, 0.0, 0.0),
            velocity=config.initial_velocity or (0.0, 0.0, 0.0),
        )
    else:
        initial = InitialConditions()

    logger.info(
        f"✓ Problem ready: {mesh.n_dof} DOF(s), {bcs.fixed.size} fixed, {len(loads)} load(s), {len(probes)} probe(s)"
    )
    return TransientProblem(
        mesh=mesh,
        catalog=catalog,
        time=TimeSettings(
            duration=config.time.duration,
            dt=config.time.dt,
            alpha=config.time.alpha,
            safety=config.time.safety,
        ),
        bcs=bcs,
        probes=probes,
        initial=initial,
        history_every=config.output.history_every,
        snapshot_every=config.output.snapshot_every,
        ordered=config.workers.ordered_reduction,
        log_every=log_every,
    )


__all__ = ["build_mesh", "build_problem", "load_catalog", "material_table"]

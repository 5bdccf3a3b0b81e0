from __future__ import annotations

import numpy as np
import pytest

from octree_wave.assembly_engine import (
    BoundaryConditions,
    TransientProblem,
    TransientSolver,
    build_solver_tables,
    dirichlet_dofs,
    element_forces,
    internal_force,
    pressure_load,
    probe_at,
    reduce_forces,
)
from octree_wave.excitation import Signal
from octree_wave.parallel_runtime import (
    WorkerClock,
    plan_exchange,
    probe_owner,
    replay_timing,
    scaling,
    spmd_run,
    sync_interface_forces,
    timing_report,
)
from octree_wave.partitioner import Partition, PartitionError, partition
from octree_wave.time_integrator import DivergenceError, TimeSettings


def _problem(mesh, catalog, ordered: bool = True, time: TimeSettings | None = None) -> TransientProblem:
    load = pressure_load(mesh, "x", 2.0, (-1.0, 0.0, 0.0), Signal("ricker", 0.5))
    bcs = BoundaryConditions(fixed=dirichlet_dofs(mesh, "x", 0.0), loads=(load,))
    probes = (probe_at(mesh, "tip", (2.0, 1.0, 1.0)), probe_at(mesh, "middle", (1.0, 1.0, 1.0)))
    return TransientProblem(
        mesh=mesh,
        catalog=catalog,
        time=time or TimeSettings(duration=2.0),
        bcs=bcs,
        probes=probes,
        snapshot_every=5,
        ordered=ordered,
    )


def test_exchange_plan_covers_every_dof(cube_mesh_2, catalog):
    tables = build_solver_tables(cube_mesh_2, catalog)
    plan = plan_exchange(tables, partition(cube_mesh_2, 2, method="geometric"))
    assert plan.n_workers == 2
    assert plan.n_interface == 27
    assert np.array_equal(plan.interface_dofs, np.sort(plan.interface_dofs))

    internal = [set(w.internal_dofs.tolist()) for w in plan.workers]
    assert not internal[0] & internal[1]
    covered = internal[0] | internal[1] | set(plan.interface_dofs.tolist())
    assert covered == set(range(tables.n_dof))
    for worker in plan.workers:
        assert worker.interface_dofs.tolist() == plan.interface_dofs.tolist()
    assert plan.workers[0].neighbours[1].tolist() == plan.interface_dofs.tolist()


def test_single_worker_has_no_interface(cube_mesh_2, catalog):
    tables = build_solver_tables(cube_mesh_2, catalog)
    plan = plan_exchange(tables, partition(cube_mesh_2, 1))
    assert plan.n_interface == 0
    assert plan.n_slots == 0
    assert plan.workers[0].dofs.tolist() == list(range(tables.n_dof))


def test_inconsistent_partitions_are_rejected(cube_mesh_2, catalog):
    tables = build_solver_tables(cube_mesh_2, catalog)
    with pytest.raises(PartitionError):
        plan_exchange(tables, Partition(np.zeros(5, dtype=np.int64), 1, "spectral"))
    with pytest.raises(PartitionError, match="no elements"):
        plan_exchange(tables, Partition(np.zeros(8, dtype=np.int64), 2, "spectral"))
    with pytest.raises(PartitionError, match="outside"):
        plan_exchange(tables, Partition(np.full(8, 3, dtype=np.int64), 2, "spectral"))


@pytest.mark.parametrize("n_parts", [2, 4])
def test_synced_forces_equal_the_serial_sum(refined_mesh, catalog, n_parts):
    tables = build_solver_tables(refined_mesh, catalog)
    plan = plan_exchange(tables, partition(refined_mesh, n_parts))
    u = np.random.default_rng(1).normal(size=tables.n_dof)
    serial = internal_force(tables, u)

    contributions = [element_forces(w.tables, u[w.dofs]) for w in plan.workers]
    forces = [reduce_forces(w.tables, c) for w, c in zip(plan.workers, contributions)]
    for ordered in (True, False):
        synced = sync_interface_forces(plan, contributions, forces, ordered)
        for worker, force in zip(plan.workers, synced):
            if ordered:
                assert np.array_equal(force, serial[worker.dofs])
            else:
                assert np.allclose(force, serial[worker.dofs], rtol=1e-12, atol=1e-12 * np.abs(serial).max())
    with pytest.raises(PartitionError):
        sync_interface_forces(plan, contributions[:1], forces[:1])


@pytest.mark.parametrize("n_workers", [2, 4])
def test_spmd_run_reproduces_the_serial_run_bitwise(cube_mesh_2, catalog, n_workers):
    serial = TransientSolver(_problem(cube_mesh_2, catalog)).run()
    parallel = spmd_run(_problem(cube_mesh_2, catalog), n_workers, backend="sim")
    result = parallel.result
    assert result.state.step == serial.state.step
    assert np.array_equal(result.state.current, serial.state.current)
    assert np.array_equal(result.state.previous, serial.state.previous)
    for name in ("tip", "middle"):
        assert np.array_equal(result.histories[name].displacement, serial.histories[name].displacement)
        assert np.array_equal(result.histories[name].acceleration, serial.histories[name].acceleration)
    assert [s.step for s in result.snapshots] == [s.step for s in serial.snapshots]
    for mine, theirs in zip(result.snapshots, serial.snapshots):
        assert np.array_equal(mine.displacement, theirs.displacement)
    assert parallel.partition.n_parts == n_workers


@pytest.mark.parametrize("method", ["spectral", "geometric"])
@pytest.mark.parametrize("n_workers", [2, 4, 8])
def test_graded_two_material_run_is_bitwise_serial(two_material_mesh, catalog, n_workers, method):
    serial = TransientSolver(_problem(two_material_mesh, catalog)).run()
    parallel = spmd_run(_problem(two_material_mesh, catalog), n_workers, backend="sim", method=method)
    result = parallel.result
    assert parallel.partition.method == method
    assert np.array_equal(result.state.current, serial.state.current)
    assert np.array_equal(result.state.previous, serial.state.previous)
    for name in ("tip", "middle"):
        assert np.array_equal(result.histories[name].displacement, serial.histories[name].displacement)
        assert np.array_equal(result.histories[name].acceleration, serial.histories[name].acceleration)


def test_worker_divergence_reaches_the_caller(cube_mesh_2, catalog):
    critical = TransientSolver(_problem(cube_mesh_2, catalog)).critical_dt
    time = TimeSettings(duration=600.0 * critical, dt=3.0 * critical)
    with pytest.raises(DivergenceError, match="worker"):
        spmd_run(_problem(cube_mesh_2, catalog, time=time), 2, backend="sim")


def test_relaxed_reduction_stays_close(cube_mesh_2, catalog):
    serial = TransientSolver(_problem(cube_mesh_2, catalog, ordered=False)).run()
    parallel = spmd_run(_problem(cube_mesh_2, catalog, ordered=False), 2).result
    scale = np.abs(serial.state.current).max()
    assert np.allclose(parallel.state.current, serial.state.current, rtol=1e-9, atol=1e-9 * scale)


def test_spmd_timing_adds_up(cube_mesh_2, catalog):
    timing = spmd_run(_problem(cube_mesh_2, catalog), 2, serial_total=1.0).timing
    assert timing.n_workers == 2
    assert timing.t_calc > 0.0
    assert timing.t_wait >= 0.0
    assert timing.t_calc + timing.t_wait <= timing.t_total * (1.0 + 1e-9)
    assert timing.t_total == pytest.approx(timing.t_calc + timing.t_wait, rel=0.05)
    for clock in timing.clocks:
        assert clock.total == pytest.approx(clock.compute + clock.wait, rel=1e-6)
    assert timing.speedup == pytest.approx(1.0 / timing.t_total)


def test_spmd_run_rejects_bad_requests(cube_mesh_2, catalog):
    problem = _problem(cube_mesh_2, catalog)
    with pytest.raises(ValueError, match="backend"):
        spmd_run(problem, 2, backend="mpi")
    with pytest.raises(PartitionError, match="worker"):
        spmd_run(problem, 2, partition=partition(cube_mesh_2, 4))


def test_probe_owner_is_a_worker_touching_the_node(cube_mesh_2, catalog):
    tables = build_solver_tables(cube_mesh_2, catalog)
    plan = plan_exchange(tables, partition(cube_mesh_2, 2, method="geometric"))
    probe = probe_at(cube_mesh_2, "tip", (2.0, 2.0, 2.0))
    rank = probe_owner(plan, probe)
    assert 3 * probe.node in plan.workers[rank].dofs
    shared = probe_at(cube_mesh_2, "middle", (1.0, 1.0, 1.0))
    assert probe_owner(plan, shared) == 0


def test_speedup_and_efficiency():
    speedup, efficiency = scaling(6566.12, 3234.37, 2)
    assert round(speedup, 2) == 2.03
    assert round(efficiency, 2) == 1.02
    _, efficiency = scaling(84.3, 1.0, 128)
    assert round(efficiency, 2) == 0.66
    with pytest.raises(ValueError):
        scaling(0.0, 1.0, 2)


def test_replayed_straggler_makes_others_wait():
    report = replay_timing(np.array([[1.0, 1.0], [3.0, 3.0]]))
    assert report.t_total == 6.0
    assert [c.wait for c in report.clocks] == [4.0, 0.0]
    assert report.t_calc == 4.0
    assert report.t_wait == 2.0

    with_exchange = replay_timing(np.array([[1.0, 1.0], [3.0, 3.0]]), exchange=0.5)
    assert with_exchange.t_total == 7.0
    assert [c.wait for c in with_exchange.clocks] == [5.0, 1.0]


def test_timing_report_needs_clocks():
    with pytest.raises(ValueError):
        timing_report([])
    report = timing_report([WorkerClock(0, 0.0, 2.0, 1.5, 0.5)], serial_total=4.0)
    assert report.speedup == 2.0
    assert report.efficiency == 2.0


@pytest.mark.slow
def test_process_backend_matches_the_simulated_one(cube_mesh_2, catalog):
    simulated = spmd_run(_problem(cube_mesh_2, catalog), 2, backend="sim").result
    processes = spmd_run(_problem(cube_mesh_2, catalog), 2, backend="proc", timeout=120.0).result
    assert np.array_equal(processes.state.current, simulated.state.current)
    assert np.array_equal(processes.histories["tip"].displacement, simulated.histories["tip"].displacement)

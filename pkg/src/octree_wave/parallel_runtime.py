"""Bulk-synchronous SPMD execution of the transient solver.

Each worker owns the elements of one part and every DOF those elements touch.
Per step it computes element forces, publishes its contributions to interface
DOFs, waits at the step barrier, reduces the interface sums and updates its
DOFs. Interface sums are accumulated in the same order as the serial solver
(ascending element id, then master DOF), so every worker count reproduces the
serial result bit for bit. With ``ordered=False`` workers use BLAS products
and add per-worker partial sums instead.

Two transports are provided: ``sim`` runs one thread per worker in this
process, with the exchange done as the action of a ``threading.Barrier``;
``proc`` runs one process per worker over shared memory with a
``multiprocessing`` barrier. Both measure waiting time at the barrier.
"""
from __future__ import annotations

import logging
import multiprocessing
import queue
import threading
import time
from dataclasses import dataclass
from multiprocessing import shared_memory
from typing import Sequence

import numpy as np

from .assembly_engine import (
    HistoryRecorder,
    LocalSystem,
    Probe,
    Snapshot,
    SolverState,
    SolverTables,
    Stepper,
    TransientProblem,
    TransientResult,
    TransientSolver,
    restrict_tables,
)
from .partitioner import Partition, PartitionError, partition as partition_mesh
from .time_integrator import DivergenceError, DivergenceMonitor

logger = logging.getLogger(__name__)

BACKENDS = ("sim", "proc")
DEFAULT_TIMEOUT = 600.0


class WorkerError(RuntimeError):
    """Raised when a worker fails or stops answering."""

    def __init__(self, message: str, rank: int) -> None:
        super().__init__(f"worker {rank}: {message}")
        self.rank = rank


@dataclass(frozen=True, eq=False)
class WorkerPlan:
    """One worker's share of the mesh and its part of the interface exchange.

    ``dofs`` maps local to global DOFs. ``slot_local``/``slot_index`` copy local
    element contributions into the shared slot buffer; ``interface_local``/
    ``interface_index`` copy reduced interface sums back.
    """

    rank: int
    elements: np.ndarray
    dofs: np.ndarray
    tables: SolverTables
    internal_dofs: np.ndarray
    interface_dofs: np.ndarray
    neighbours: dict[int, np.ndarray]
    interface_local: np.ndarray
    interface_index: np.ndarray
    slot_local: np.ndarray
    slot_index: np.ndarray


@dataclass(frozen=True, eq=False)
class ExchangePlan:
    """Interface DOFs in ascending global order and the canonical slot layout.

    Slot ``k`` holds one element contribution to interface DOF
    ``interface_dofs[slot_interface[k]]``; slots follow the serial summation
    order.
    """

    n_dof: int
    interface_dofs: np.ndarray
    slot_interface: np.ndarray
    workers: tuple[WorkerPlan, ...]

    @property
    def n_workers(self) -> int:
        return len(self.workers)

    @property
    def n_slots(self) -> int:
        return int(self.slot_interface.size)

    @property
    def n_interface(self) -> int:
        return int(self.interface_dofs.size)


def plan_exchange(tables: SolverTables, partition: Partition) -> ExchangePlan:
    """Derive worker DOF sets and the interface reduction layout from a partition.

    Takes the solver tables of the mesh rather than the mesh itself: the
    element DOF maps and the serial contribution order live there.
    """

    labels = np.asarray(partition.labels, dtype=np.int64)
    if labels.size != tables.n_elements:
        raise PartitionError(f"partition labels {labels.size} elements, tables hold {tables.n_elements}")
    if labels.size and (labels.min() < 0 or labels.max() >= partition.n_parts):
        raise PartitionError(f"labels outside [0, {partition.n_parts})")
    n_parts = partition.n_parts
    counts = np.diff(tables.element_offsets)
    flat_labels = np.repeat(labels, counts)
    pairs = np.unique(tables.flat_dofs * n_parts + flat_labels)
    pair_dof, pair_label = pairs // n_parts, pairs % n_parts
    owners = np.bincount(pair_dof, minlength=tables.n_dof)
    if np.any(owners == 0):
        raise PartitionError(f"{int(np.sum(owners == 0))} DOF(s) belong to no element")

    shared = owners >= 2
    interface_dofs = np.flatnonzero(shared)
    interface_of = np.full(tables.n_dof, -1, dtype=np.int64)
    interface_of[interface_dofs] = np.arange(interface_dofs.size)
    slot_positions = np.flatnonzero(shared[tables.flat_dofs])
    slot_of = np.full(tables.n_contributions, -1, dtype=np.int64)
    slot_of[slot_positions] = np.arange(slot_positions.size)
    slot_interface = interface_of[tables.flat_dofs[slot_positions]]

    shared_pairs = shared[pair_dof]
    by_rank = {rank: pair_dof[shared_pairs & (pair_label == rank)] for rank in range(n_parts)}
    workers = []
    for rank in range(n_parts):
        elements = np.flatnonzero(labels == rank)
        if elements.size == 0:
            raise PartitionError(f"part {rank} has no elements")
        local, dofs, flat_positions = restrict_tables(tables, elements)
        in_slots = slot_of[flat_positions] >= 0
        is_interface = shared[dofs]
        neighbours = {}
        for other in range(n_parts):
            if other != rank:
                common = np.intersect1d(by_rank[rank], by_rank[other], assume_unique=True)
                if common.size:
                    neighbours[other] = common
        workers.append(
            WorkerPlan(
                rank=rank,
                elements=elements,
                dofs=dofs,
                tables=local,
                internal_dofs=dofs[~is_interface],
                interface_dofs=dofs[is_interface],
                neighbours=neighbours,
                interface_local=np.flatnonzero(is_interface),
                interface_index=interface_of[dofs[is_interface]],
                slot_local=np.flatnonzero(in_slots),
                slot_index=slot_of[flat_positions[in_slots]],
            )
        )
    plan = ExchangePlan(tables.n_dof, interface_dofs, slot_interface, tuple(workers))
    logger.debug(f"exchange plan: {n_parts} worker(s), {plan.n_interface} interface DOF(s), {plan.n_slots} slot(s)")
    return plan


def reduce_slots(plan: ExchangePlan, slots: np.ndarray) -> np.ndarray:
    return np.bincount(plan.slot_interface, weights=slots, minlength=plan.n_interface)


def sync_interface_forces(
    plan: ExchangePlan,
    contributions: Sequence[np.ndarray],
    forces: Sequence[np.ndarray],
    ordered: bool = True,
) -> list[np.ndarray]:
    """Replace each worker's partial interface forces by the complete sums."""

    if len(contributions) != plan.n_workers or len(forces) != plan.n_workers:
        raise PartitionError(f"expected fragments from {plan.n_workers} worker(s)")
    if ordered:
        slots = np.zeros(plan.n_slots)
        for worker, values in zip(plan.workers, contributions):
            slots[worker.slot_index] = values[worker.slot_local]
        sums = reduce_slots(plan, slots)
    else:
        partial = np.zeros((plan.n_workers, plan.n_interface))
        for worker, force in zip(plan.workers, forces):
            partial[worker.rank, worker.interface_index] = force[worker.interface_local]
        sums = partial.sum(axis=0)
    synced = []
    for worker, force in zip(plan.workers, forces):
        result = np.array(force, dtype=float, copy=True)
        result[worker.interface_local] = sums[worker.interface_index]
        synced.append(result)
    return synced


@dataclass(frozen=True)
class WorkerClock:
    rank: int
    start: float
    end: float
    compute: float
    wait: float

    @property
    def total(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class TimingReport:
    n_workers: int
    t_calc: float
    t_wait: float
    t_total: float
    clocks: tuple[WorkerClock, ...] = ()
    speedup: float | None = None
    efficiency: float | None = None

    def with_reference(self, serial_total: float) -> "TimingReport":
        speedup, efficiency = scaling(serial_total, self.t_total, self.n_workers)
        return TimingReport(
            self.n_workers, self.t_calc, self.t_wait, self.t_total, self.clocks, speedup, efficiency
        )


def scaling(serial_total: float, parallel_total: float, n_workers: int) -> tuple[float, float]:
    """Strong-scaling speedup t_T(1)/t_T(N) and efficiency speedup/N."""

    if serial_total <= 0 or parallel_total <= 0 or n_workers < 1:
        raise ValueError("timings and worker count must be positive")
    speedup = serial_total / parallel_total
    return speedup, speedup / n_workers


def timing_report(clocks: Sequence[WorkerClock], serial_total: float | None = None) -> TimingReport:
    """Aggregate worker clocks.

    The run starts when the earliest worker starts and ends when the last one
    finishes; calculation and waiting times are averaged over workers.
    """

    if not clocks:
        raise ValueError("no worker clocks to report")
    t_total = max(c.end for c in clocks) - min(c.start for c in clocks)
    report = TimingReport(
        n_workers=len(clocks),
        t_calc=float(np.mean([c.compute for c in clocks])),
        t_wait=float(np.mean([c.wait for c in clocks])),
        t_total=float(t_total),
        clocks=tuple(clocks),
    )
    return report.with_reference(serial_total) if serial_total is not None else report


def replay_timing(step_compute: np.ndarray, exchange: float | np.ndarray = 0.0) -> TimingReport:
    """Timing of a bulk-synchronous run from per-worker, per-step compute durations.

    ``step_compute`` has shape (workers, steps). Every step ends when the
    slowest worker is done plus the exchange time; the others wait.
    """

    compute = np.atleast_2d(np.asarray(step_compute, dtype=float))
    n_steps = compute.shape[1]
    exchange_steps = np.broadcast_to(np.asarray(exchange, dtype=float), (n_steps,))
    slowest = compute.max(axis=0)
    step_total = slowest + exchange_steps
    end = float(step_total.sum())
    clocks = [
        WorkerClock(
            rank=rank,
            start=0.0,
            end=end,
            compute=float(row.sum()),
            wait=float((step_total - row).sum()),
        )
        for rank, row in enumerate(compute)
    ]
    return timing_report(clocks)


def _worker_system(solver: TransientSolver, worker: WorkerPlan) -> LocalSystem:
    fixed = np.flatnonzero(np.isin(worker.dofs, solver.fixed))
    return LocalSystem(
        tables=worker.tables,
        dofs=worker.dofs,
        fixed=fixed,
        amplitudes=solver.amplitudes[:, worker.dofs],
        signals=solver.problem.bcs.signals,
        dt=solver.dt,
        alpha=solver.problem.time.alpha,
        ordered=solver.problem.ordered,
    )


def _lowest_owner(plan: ExchangePlan) -> np.ndarray:
    owner = np.full(plan.n_dof, plan.n_workers, dtype=np.int64)
    for worker in reversed(plan.workers):
        owner[worker.dofs] = worker.rank
    return owner


@dataclass
class _WorkerSetup:
    """Everything a worker needs, picklable for process workers."""

    plan: WorkerPlan
    system: LocalSystem
    state: SolverState
    recorder: HistoryRecorder
    corner_index: np.ndarray
    monitor_scale: float
    stop: int


def _setups(solver: TransientSolver, plan: ExchangePlan, state: SolverState, stop: int) -> list[_WorkerSetup]:
    owner = _lowest_owner(plan)
    problem = solver.problem
    corner_dofs = 3 * solver.corner_nodes
    corner_owner = owner[corner_dofs]
    scale = solver.load_scale(state)
    setups = []
    for worker in plan.workers:
        probes = [p for p in problem.probes if probe_owner(plan, p, owner) == worker.rank]
        probe_dofs = np.array([3 * p.node + np.arange(3) for p in probes], dtype=np.int64).reshape(-1, 3)
        corner_index = np.flatnonzero(corner_owner == worker.rank)
        corner_local = np.searchsorted(worker.dofs, (corner_dofs[corner_index, None] + np.arange(3)).ravel())
        recorder = HistoryRecorder(
            probes,
            np.searchsorted(worker.dofs, probe_dofs),
            problem.history_every,
            corner_local,
            problem.snapshot_every,
            solver.dt,
        )
        local_state = SolverState(state.step, state.previous[worker.dofs], state.current[worker.dofs])
        setups.append(
            _WorkerSetup(worker, _worker_system(solver, worker), local_state, recorder, corner_index, scale, stop)
        )
    return setups


def _raise_failures(failures: Sequence[tuple[str, int, str, int | None]]) -> None:
    """Divergence first, then worker errors, then barriers broken by either."""

    for kind, rank, message, step in sorted(failures, key=lambda f: f[1]):
        if kind == "divergence":
            raise DivergenceError(f"worker {rank}: {message}", step=step)
    for kind, rank, message, _ in sorted(failures, key=lambda f: f[1]):
        if kind == "error":
            raise WorkerError(message, rank)
    if failures:
        _, rank, message, _ = min(failures, key=lambda f: f[1])
        raise WorkerError(message, rank)


def _run_threads(
    plan: ExchangePlan, setups: list[_WorkerSetup], timeout: float
) -> tuple[list[SolverState], list[WorkerClock]]:
    n = plan.n_workers
    ordered = setups[0].system.ordered
    contributions: list[np.ndarray] = [np.empty(0)] * n
    forces: list[np.ndarray] = [np.empty(0)] * n
    synced: list[np.ndarray] = []

    def exchange() -> None:
        synced[:] = sync_interface_forces(plan, contributions, forces, ordered)

    step_barrier = threading.Barrier(n, action=exchange, timeout=timeout)
    edge_barrier = threading.Barrier(n, timeout=timeout)
    states: list[SolverState | None] = [None] * n
    clocks: list[WorkerClock | None] = [None] * n
    failures: list[tuple[str, int, str, int | None]] = []

    def work(setup: _WorkerSetup) -> None:
        rank = setup.plan.rank
        stepper = Stepper(setup.system, setup.state, setup.recorder, DivergenceMonitor(setup.monitor_scale))
        try:
            edge_barrier.wait()
            start = time.perf_counter()
            waited = 0.0
            while stepper.step < setup.stop:
                contributions[rank], forces[rank] = stepper.forces()
                mark = time.perf_counter()
                step_barrier.wait()
                waited += time.perf_counter() - mark
                stepper.advance(synced[rank])
            mark = time.perf_counter()
            edge_barrier.wait()
            end = time.perf_counter()
            waited += end - mark
            states[rank] = stepper.state()
            clocks[rank] = WorkerClock(rank, start, end, end - start - waited, waited)
        except DivergenceError as exc:
            step_barrier.abort()
            edge_barrier.abort()
            failures.append(("divergence", rank, str(exc), exc.step))
        except threading.BrokenBarrierError:
            failures.append(("broken", rank, "barrier broken by another worker", None))
        except Exception as exc:  # noqa: BLE001 - reported to the driver
            step_barrier.abort()
            edge_barrier.abort()
            failures.append(("error", rank, f"{type(exc).__name__}: {exc}", None))

    threads = [
        threading.Thread(target=work, args=(setup,), name=f"octree-wave-worker-{setup.plan.rank}")
        for setup in setups
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    _raise_failures(failures)
    return states, clocks  # type: ignore[return-value]


def _process_worker(
    setup: _WorkerSetup,
    shm_name: str,
    buffer_shape: tuple[int, ...],
    slot_interface: np.ndarray,
    n_interface: int,
    barrier: threading.Barrier,
    results: "multiprocessing.Queue[tuple]",
) -> None:
    rank = setup.plan.rank
    shm = None
    try:
        shm = shared_memory.SharedMemory(name=shm_name)
        buffers = np.ndarray(buffer_shape, dtype=np.float64, buffer=shm.buf)
        worker = setup.plan
        ordered = setup.system.ordered
        waited = 0.0

        def sync(step: int, values: np.ndarray, internal: np.ndarray) -> None:
            nonlocal waited
            buffer = buffers[step % 2]
            if ordered:
                buffer[worker.slot_index] = values[worker.slot_local]
            else:
                buffer[rank, worker.interface_index] = internal[worker.interface_local]
            mark = time.perf_counter()
            barrier.wait()
            if ordered:
                sums = np.bincount(slot_interface, weights=buffer[: slot_interface.size], minlength=n_interface)
            else:
                sums = buffer.sum(axis=0)
            internal[worker.interface_local] = sums[worker.interface_index]
            waited += time.perf_counter() - mark

        stepper = Stepper(setup.system, setup.state, setup.recorder, DivergenceMonitor(setup.monitor_scale))
        start = time.perf_counter()
        while stepper.step < setup.stop:
            values, internal = stepper.forces()
            sync(stepper.step, values, internal)
            stepper.advance(internal)
        end = time.perf_counter()
        clock = WorkerClock(rank, start, end, end - start - waited, waited)
        results.put(("ok", rank, setup.recorder, stepper.state(), clock))
    except DivergenceError as exc:
        barrier.abort()
        results.put(("divergence", rank, str(exc), exc.step))
    except threading.BrokenBarrierError:
        results.put(("broken", rank, "barrier broken by another worker", None))
    except Exception as exc:  # noqa: BLE001 - reported to the driver
        barrier.abort()
        results.put(("error", rank, f"{type(exc).__name__}: {exc}", None))
    finally:
        if shm is not None:
            shm.close()


def _run_processes(
    plan: ExchangePlan, setups: list[_WorkerSetup], timeout: float
) -> tuple[list[SolverState], list[WorkerClock], list[HistoryRecorder]]:
    context = multiprocessing.get_context("spawn")
    ordered = setups[0].system.ordered
    shape = (2, max(plan.n_slots, 1)) if ordered else (2, plan.n_workers, max(plan.n_interface, 1))
    shm = shared_memory.SharedMemory(create=True, size=int(np.prod(shape)) * 8)
    try:
        np.ndarray(shape, dtype=np.float64, buffer=shm.buf)[...] = 0.0
        barrier = context.Barrier(plan.n_workers, timeout=timeout)
        results = context.Queue()
        processes = [
            context.Process(
                target=_process_worker,
                args=(setup, shm.name, shape, plan.slot_interface, plan.n_interface, barrier, results),
                name=f"octree-wave-worker-{setup.plan.rank}",
            )
            for setup in setups
        ]
        for process in processes:
            process.start()
        messages = []
        deadline = time.monotonic() + timeout
        try:
            while len(messages) < len(processes):
                remaining = max(deadline - time.monotonic(), 0.0)
                messages.append(results.get(timeout=remaining))
        except queue.Empty as exc:
            for process in processes:
                process.terminate()
            silent = sorted(set(range(len(processes))) - {m[1] for m in messages})
            raise WorkerError(f"no result within {timeout:g} s", silent[0]) from exc
        finally:
            for process in processes:
                process.join(timeout=5.0)
    finally:
        shm.close()
        shm.unlink()

    _raise_failures([m[:4] for m in messages if m[0] != "ok"])
    done = sorted(messages, key=lambda m: m[1])
    return [m[3] for m in done], [m[4] for m in done], [m[2] for m in done]


@dataclass
class SpmdResult:
    result: TransientResult
    timing: TimingReport
    partition: Partition
    plan: ExchangePlan


def _merge(
    solver: TransientSolver,
    plan: ExchangePlan,
    setups: list[_WorkerSetup],
    recorders: list[HistoryRecorder],
    states: list[SolverState],
    wall: float,
) -> TransientResult:
    histories = {}
    for recorder in recorders:
        histories.update(recorder.histories())
    ordered_histories = {probe.name: histories[probe.name] for probe in solver.problem.probes}

    snapshots = []
    n_snapshots = len(recorders[0].snapshots)
    for k in range(n_snapshots):
        full = np.zeros((solver.corner_nodes.size, 3))
        for setup, recorder in zip(setups, recorders):
            full[setup.corner_index] = recorder.snapshots[k].displacement
        first = recorders[0].snapshots[k]
        snapshots.append(Snapshot(first.step, first.time, full))

    previous = np.zeros(plan.n_dof)
    current = np.zeros(plan.n_dof)
    for worker, state in zip(plan.workers, states):
        previous[worker.dofs] = state.previous
        current[worker.dofs] = state.current
    return TransientResult(
        histories=ordered_histories,
        snapshots=snapshots,
        state=SolverState(states[0].step, previous, current),
        dt=solver.dt,
        n_steps=solver.n_steps,
        corner_nodes=solver.corner_nodes,
        wall_time=wall,
    )


def spmd_run(
    problem: TransientProblem,
    n_workers: int,
    backend: str = "sim",
    partition: Partition | None = None,
    method: str = "auto",
    spectral_dof_threshold: float | None = None,
    timeout: float = DEFAULT_TIMEOUT,
    serial_total: float | None = None,
) -> SpmdResult:
    """Run ``problem`` on ``n_workers`` workers; timing excludes the set-up stage."""

    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    solver = TransientSolver(problem)
    if partition is None:
        kwargs = {} if spectral_dof_threshold is None else {"spectral_dof_threshold": spectral_dof_threshold}
        partition = partition_mesh(problem.mesh, n_workers, method=method, **kwargs)
    if partition.n_parts != n_workers:
        raise PartitionError(f"partition has {partition.n_parts} part(s) for {n_workers} worker(s)")
    plan = plan_exchange(solver.tables, partition)
    state = solver.initial_state()
    stop = solver.n_steps + 1
    setups = _setups(solver, plan, state, stop)
    logger.info(
        f"Running {stop} step(s) on {n_workers} {backend} worker(s): "
        f"{plan.n_interface} interface DOF(s) of {plan.n_dof}"
    )

    started = time.perf_counter()
    if backend == "sim":
        states, clocks = _run_threads(plan, setups, timeout)
        recorders = [setup.recorder for setup in setups]
    else:
        states, clocks, recorders = _run_processes(plan, setups, timeout)
    wall = time.perf_counter() - started

    result = _merge(solver, plan, setups, recorders, states, wall)
    timing = timing_report(clocks, serial_total)
    logger.info(
        f"✓ SPMD run finished: t_T={timing.t_total:.3f} s, t_C={timing.t_calc:.3f} s, t_W={timing.t_wait:.3f} s"
    )
    return SpmdResult(result=result, timing=timing, partition=partition, plan=plan)


def probe_owner(plan: ExchangePlan, probe: Probe, owner: np.ndarray | None = None) -> int:
    """Lowest-ranked worker holding the probe node; that worker records its history."""

    owner = _lowest_owner(plan) if owner is None else owner
    return int(owner[3 * probe.node])


__all__ = [
    "BACKENDS",
    "ExchangePlan",
    "SpmdResult",
    "TimingReport",
    "WorkerClock",
    "WorkerError",
    "WorkerPlan",
    "plan_exchange",
    "probe_owner",
    "reduce_slots",
    "replay_timing",
    "scaling",
    "spmd_run",
    "sync_interface_forces",
    "timing_report",
]

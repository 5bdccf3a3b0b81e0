"""Command-line interface for the octree wave solver."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from .assembly_engine import AssemblyError, TransientResult, TransientSolver
from .config import ConfigError, RunConfig, default_output_dir, load_env, load_run_config
from .excitation import (
    ExcitationError,
    SIGNAL_KINDS,
    Signal,
    central_frequency,
    critical_frequency,
    recommended_element_size,
    sample_signal,
    sample_spectrum,
    spectral_peak,
    wave_properties,
)
from .exporters import (
    export_convergence,
    export_histories,
    export_partition,
    export_series,
    export_timing,
    export_vtk,
    format_timing_table,
    load_results,
    save_report,
    save_results,
)
from .mesh_io import save_mesh
from .octree_mesh import MeshError
from .parallel_runtime import BACKENDS, TimingReport, WorkerClock, WorkerError, spmd_run, timing_report
from .partitioner import METHODS, PartitionError, partition
from .pattern_catalog import MasterCatalog, PatternError, pattern_count
from .pipeline import build_mesh, build_problem, load_catalog
from .time_integrator import DivergenceError, critical_time_step
from .verification import CUBE_VARIANTS, MESH_TYPES, CubeSpec, beam_convergence, cube_convergence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DOMAIN_ERRORS = (
    AssemblyError,
    DivergenceError,
    ExcitationError,
    MeshError,
    PartitionError,
    PatternError,
    WorkerError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Explicit octree SBFEM elastodynamics")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging (DEBUG level)")
    subparsers = parser.add_subparsers(dest="command")

    mesh_parser = subparsers.add_parser("mesh", help="Build, balance and number the octree of a run config")
    mesh_parser.add_argument("config", type=Path, help="Run configuration (JSON)")
    mesh_parser.add_argument("--output", type=Path, help="Binary mesh file (defaults to <output dir>/mesh.owm)")
    mesh_parser.add_argument("--vtk", type=Path, help="Also write the mesh as a VTK file")
    mesh_parser.add_argument("--cache", type=Path, help="Master-cell cache used to report the critical time step")

    pre_parser = subparsers.add_parser("precompute", help="Build master cells and store them in a cache file")
    pre_parser.add_argument("--nu", type=float, action="append", required=True, help="Poisson ratio (repeatable)")
    pre_parser.add_argument("--cache", type=Path, required=True, help="Cache file to write")
    pre_parser.add_argument("--workers", type=int, default=1, help="Threads used to build master cells")
    pre_parser.add_argument("--patterns", type=int, nargs="*", help="Canonical pattern ids (default: all)")

    part_parser = subparsers.add_parser("partition", help="Split a mesh into power-of-two parts")
    part_parser.add_argument("config", type=Path, help="Run configuration (JSON)")
    part_parser.add_argument("--parts", type=int, help="Number of parts, a power of two (defaults to the config)")
    part_parser.add_argument("--method", choices=METHODS, default="auto")
    part_parser.add_argument("--output", type=Path, help="Partition JSON (defaults to <output dir>/partition.json)")
    part_parser.add_argument("--vtk", type=Path, help="Also write the mesh coloured by part")

    run_parser = subparsers.add_parser("run", help="Run a transient analysis")
    run_parser.add_argument("config", type=Path, help="Run configuration (JSON)")
    run_parser.add_argument("--workers", type=int, help="Number of workers (overrides the config)")
    run_parser.add_argument("--backend", choices=BACKENDS, help="Worker backend (overrides the config)")
    run_parser.add_argument("--output-dir", type=Path, help="Output directory (overrides the config)")
    run_parser.add_argument("--cache", type=Path, help="Master-cell cache file")
    run_parser.add_argument(
        "--relaxed", action="store_true", help="Reduce interface forces per worker (not bit-reproducible)"
    )
    run_parser.add_argument(
        "--compare-serial", action="store_true", help="Also run serially and report speedup and agreement"
    )
    run_parser.add_argument("--log-every", type=int, default=0, help="Log progress every N steps")

    verify_parser = subparsers.add_parser("verify", help="Convergence studies against reference solutions")
    verify_sub = verify_parser.add_subparsers(dest="case")
    cube_parser = verify_sub.add_parser("cube", help="Free vibration of a cube with rollers")
    cube_parser.add_argument("--sizes", type=int, nargs="+", default=[8, 12, 16], help="Cells per edge")
    cube_parser.add_argument("--mesh-type", type=int, choices=MESH_TYPES, default=1)
    cube_parser.add_argument("--count", type=int, default=100, help="Number of eigenfrequencies compared")
    cube_parser.add_argument("--variant", choices=CUBE_VARIANTS, default="elastic")
    cube_parser.add_argument("--output", type=Path, help="Convergence CSV")
    beam_parser = verify_sub.add_parser("beam", help="Bar under an end pressure pulse")
    beam_parser.add_argument("--sizes", type=float, nargs="+", default=[0.5, 0.25, 0.125], help="Element sizes")
    beam_parser.add_argument("--t1", type=float, default=0.015, help="Ricker duration parameter")
    beam_parser.add_argument("--duration", type=float, default=0.24)
    beam_parser.add_argument("--output", type=Path, help="Convergence CSV")
    for sub in (cube_parser, beam_parser):
        sub.add_argument("--cache", type=Path, help="Master-cell cache file")

    signal_parser = subparsers.add_parser("signal", help="Sample a signal and its spectrum")
    signal_parser.add_argument("--kind", choices=SIGNAL_KINDS, default="ricker")
    signal_parser.add_argument("--t1", type=float, required=True)
    signal_parser.add_argument("--amplitude", type=float, default=1.0)
    signal_parser.add_argument("--cycles", type=int, default=1)
    signal_parser.add_argument("--samples", type=int, default=501)
    signal_parser.add_argument("--output-dir", type=Path, help="Where signal.csv and spectrum.csv go")
    signal_parser.add_argument("--youngs-modulus", type=float, help="With --poisson-ratio and --density: wave data")
    signal_parser.add_argument("--poisson-ratio", type=float)
    signal_parser.add_argument("--density", type=float)

    probe_parser = subparsers.add_parser("probe", help="Export probe histories from a results archive")
    probe_parser.add_argument("results", type=Path, help="results.npz written by `run`")
    probe_parser.add_argument("--output-dir", type=Path, help="Directory for the CSV files")
    probe_parser.add_argument("--probe", action="append", help="Only this probe (repeatable)")

    return parser


def _output_dir(config: RunConfig | None, override: Path | None) -> Path:
    if override is not None:
        return override
    return config.output.directory if config is not None else default_output_dir()


def _cmd_mesh(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    mesh = build_mesh(config)
    output = args.output or _output_dir(config, None) / "mesh.owm"
    save_mesh(mesh, output)
    if args.vtk is not None:
        export_vtk(mesh, args.vtk)
    critical = None
    if args.cache is not None:
        critical = critical_time_step(mesh, load_catalog(args.cache))
    save_report(output.with_suffix(".txt"), mesh, critical_dt=critical)
    print(f"Mesh saved to {output} ({mesh.n_cells} cells, {mesh.n_nodes} nodes)")
    return EXIT_OK


def _cmd_precompute(args: argparse.Namespace) -> int:
    if args.workers < 1:
        raise ConfigError(f"--workers must be positive, got {args.workers}")
    patterns = args.patterns
    if patterns:
        bad = [p for p in patterns if not 1 <= p <= pattern_count()]
        if bad:
            raise ConfigError(f"pattern ids {bad} outside 1..{pattern_count()}")
    catalog = MasterCatalog.load(args.cache) if args.cache.is_file() else MasterCatalog()
    catalog.precompute(args.nu, patterns, workers=args.workers)
    catalog.save(args.cache)
    print(f"Master-cell cache saved to {args.cache} ({len(catalog)} cells)")
    return EXIT_OK


def _cmd_partition(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    mesh = build_mesh(config)
    parts = args.parts if args.parts is not None else config.partition.parts
    if parts < 1 or parts & (parts - 1):
        raise ConfigError(f"--parts must be a power of two, got {parts}")
    result = partition(mesh, parts, args.method, config.partition.spectral_dof_threshold)
    output = args.output or _output_dir(config, None) / "partition.json"
    export_partition(result, output)
    if args.vtk is not None:
        export_vtk(mesh, args.vtk, part_labels=result.labels)
    print(f"Partition saved to {output} (sizes {result.sizes.tolist()})")
    return EXIT_OK


def _serial_report(wall: float) -> TimingReport:
    clock = WorkerClock(rank=0, start=0.0, end=wall, compute=wall, wait=0.0)
    return timing_report([clock], serial_total=wall)


def _histories_match(a: TransientResult, b: TransientResult) -> bool:
    return all(
        np.array_equal(a.histories[name].displacement, b.histories[name].displacement)
        and np.array_equal(a.histories[name].acceleration, b.histories[name].acceleration)
        for name in a.histories
    )


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    workers = args.workers if args.workers is not None else config.workers.count
    backend = args.backend or config.workers.backend
    output = _output_dir(config, args.output_dir)
    if workers < 1 or workers & (workers - 1):
        raise ConfigError(f"worker count must be a power of two, got {workers}")

    mesh = build_mesh(config)
    catalog = load_catalog(args.cache)
    problem = build_problem(config, mesh, catalog, log_every=args.log_every)
    if args.relaxed:
        problem = dataclasses.replace(problem, ordered=False)

    reports: list[TimingReport] = []
    serial: TransientResult | None = None
    if workers == 1 or args.compare_serial:
        solver = TransientSolver(problem)
        started = time.perf_counter()
        serial = solver.run()
        reports.append(_serial_report(time.perf_counter() - started))
    labels = None
    result = serial
    if workers > 1:
        spmd = spmd_run(
            problem,
            workers,
            backend=backend,
            partition=None,
            method=config.partition.method,
            spectral_dof_threshold=config.partition.spectral_dof_threshold,
            timeout=config.workers.timeout,
            serial_total=reports[0].t_total if reports else None,
        )
        reports.append(spmd.timing)
        labels = spmd.partition.labels
        result = spmd.result
        if serial is not None:
            same = _histories_match(serial, spmd.result)
            logger.info(f"Serial and {workers}-worker histories {'agree bitwise' if same else 'differ'}")
            print(f"Serial agreement: {'bitwise' if same else 'not bitwise'}")
    assert result is not None

    export_histories(result.histories, output)
    save_results(result.histories, output / "results.npz")
    if config.output.vtk:
        for snapshot in result.snapshots:
            export_vtk(
                mesh,
                output / f"snapshot_{snapshot.step:06d}.vtk",
                displacement=snapshot.displacement,
                part_labels=labels,
            )
    export_timing(reports, output / "timing.csv")
    print(format_timing_table(reports))
    save_report(
        output / "report.txt",
        mesh,
        notes={
            "workers": workers,
            "backend": backend if workers > 1 else "serial",
            "ordered reduction": problem.ordered,
            "time step [s]": f"{result.dt:.6e}",
            "steps": result.n_steps,
            "probes": len(result.histories),
            "snapshots": len(result.snapshots),
        },
    )
    print(f"Results saved to {output}")
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    catalog = load_catalog(args.cache)
    if args.case == "cube":
        study = cube_convergence(args.sizes, args.mesh_type, args.count, CubeSpec(), catalog, args.variant)
        series = ("lumped", "consistent")
    else:
        study = beam_convergence(args.sizes, args.t1, args.duration, catalog)
        series = ("displacement", "acceleration")
    output = args.output or default_output_dir() / f"verify_{study.name}.csv"
    export_convergence(study, output)
    for row in study.rows:
        print(f"{row.label:>12} n_dof={row.n_dof:>8} error={row.error:.4e}")
    if len({row.n_dof for row in study.rows}) > 1:
        for label in series:
            print(f"{label:>12} slope={study.slope(label):.3f}")
    print(f"Convergence data saved to {output}")
    return EXIT_OK


def _cmd_signal(args: argparse.Namespace) -> int:
    signal = Signal(args.kind, args.t1, args.amplitude, args.cycles)
    output = args.output_dir or default_output_dir()
    times, values = sample_signal(signal, samples=args.samples)
    frequencies, amplitudes = sample_spectrum(signal, samples=args.samples)
    export_series(output / "signal.csv", ("t [s]", "value"), (times, values))
    export_series(output / "spectrum.csv", ("f [Hz]", "amplitude"), (frequencies, amplitudes))
    f1 = critical_frequency(signal)
    print(f"f_m = {central_frequency(signal):.6g} Hz, f_peak = {spectral_peak(signal):.6g} Hz, f1 = {f1:.6g} Hz")
    material = (args.youngs_modulus, args.poisson_ratio, args.density)
    if any(v is not None for v in material):
        if any(v is None for v in material):
            raise ConfigError("--youngs-modulus, --poisson-ratio and --density go together")
        props = wave_properties(*material, f1=f1)  # type: ignore[misc]
        print(
            f"v_p = {props.v_p:.6g} m/s, v_s = {props.v_s:.6g} m/s, "
            f"l_p = {props.l_p:.6g} m, l_s = {props.l_s:.6g} m, "
            f"h_max = {recommended_element_size(props):.6g} m"
        )
    print(f"Signal and spectrum saved to {output}")
    return EXIT_OK


def _cmd_probe(args: argparse.Namespace) -> int:
    histories = load_results(args.results)
    if args.probe:
        missing = sorted(set(args.probe) - set(histories))
        if missing:
            raise ConfigError(f"unknown probe(s) {missing}; available: {sorted(histories)}")
        histories = {name: histories[name] for name in args.probe}
    output = args.output_dir or args.results.parent
    export_histories(histories, output)
    print(f"{len(histories)} probe histories saved to {output}")
    return EXIT_OK


COMMANDS = {
    "mesh": _cmd_mesh,
    "precompute": _cmd_precompute,
    "partition": _cmd_partition,
    "run": _cmd_run,
    "verify": _cmd_verify,
    "signal": _cmd_signal,
    "probe": _cmd_probe,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    # Configure logging after parsing args to check for verbose flag
    log_level = logging.DEBUG if getattr(args, "verbose", False) else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%H:%M:%S",
    )
    if args.command not in COMMANDS or (args.command == "verify" and args.case is None):
        parser.print_help()
        return EXIT_USAGE

    load_env()
    logger.info(f"Starting octree-wave {args.command}")
    try:
        code = COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error(f"Configuration error: {exc}")
        return EXIT_USAGE
    except DOMAIN_ERRORS as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_FAILURE
    logger.info(f"✓ {args.command} complete")
    return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())

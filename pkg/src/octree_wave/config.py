"""Environment helpers and the JSON run configuration."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

ENV_OUTPUT_DIR = "OCTREE_WAVE_OUTPUT_DIR"
ENV_BACKEND = "OCTREE_WAVE_BACKEND"
ENV_CACHE = "OCTREE_WAVE_CACHE"
DEFAULT_OUTPUT_DIR = Path("artifacts/runs")
PROJECT_ROOT = Path(__file__).resolve().parents[2]


class ConfigError(ValueError):
    """Raised for malformed run configurations."""


def load_env(path: Path | None = None) -> Path | None:
    """Export ``KEY=VALUE`` pairs from a .env file, typically the ``OCTREE_WAVE_*`` defaults.

    An explicit ``path`` is the only candidate when given; otherwise ``./.env``
    is tried before the checkout's ``.env``. Variables already set are left
    alone. Returns the file that was read.
    """

    candidates = [path] if path is not None else [Path.cwd() / ".env", PROJECT_ROOT / ".env"]
    for candidate in candidates:
        if candidate.is_file():
            for key, value in _env_pairs(candidate):
                os.environ.setdefault(key, value)
            return candidate
    return None


def _env_pairs(path: Path) -> Iterator[tuple[str, str]]:
    for line in path.read_text(encoding="utf-8").splitlines():
        key, sep, value = line.strip().partition("=")
        key = key.strip()
        if not sep or not key or key.startswith("#"):
            continue
        yield key, value.strip().strip("\"'")


def default_output_dir() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR)


def default_backend() -> str:
    return os.environ.get(ENV_BACKEND) or "sim"


def default_cache() -> Path | None:
    value = os.environ.get(ENV_CACHE)
    return Path(value) if value else None


def _section(raw: object, where: str, required: Iterable[str] = (), optional: Iterable[str] = ()) -> dict[str, Any]:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    required, optional = set(required), set(optional)
    unknown = sorted(set(raw) - required - optional)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    missing = sorted(required - set(raw))
    if missing:
        raise ConfigError(f"{where}: missing key(s) {missing}")
    return dict(raw)


def _number(value: object, where: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{where}: must be positive, got {value}")
    return float(value)


def _integer(value: object, where: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    return int(value)


def _vector(value: object, where: str) -> tuple[float, float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"{where}: expected three numbers, got {value!r}")
    return tuple(_number(v, where) for v in value)  # type: ignore[return-value]


def _choice(value: object, where: str, choices: Iterable[str]) -> str:
    choices = tuple(choices)
    if value not in choices:
        raise ConfigError(f"{where}: expected one of {choices}, got {value!r}")
    return str(value)


def _path(value: object, where: str, base: Path) -> Path:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{where}: expected a path string, got {value!r}")
    path = Path(value)
    return path if path.is_absolute() else base / path


@dataclass(frozen=True)
class PrimitiveConfig:
    kind: str
    material: int
    lower: tuple[float, float, float] | None = None
    upper: tuple[float, float, float] | None = None
    center: tuple[float, float, float] | None = None
    radius: float | None = None


@dataclass(frozen=True)
class VoxelConfig:
    path: Path
    spacing: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GeometryConfig:
    root_size: float
    max_level: int
    min_level: int = 0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    homogeneity: bool = True
    refine_boundary: bool = True
    primitives: tuple[PrimitiveConfig, ...] = ()
    voxels: VoxelConfig | None = None


@dataclass(frozen=True)
class MeshConfig:
    path: Path | None = None
    geometry: GeometryConfig | None = None


@dataclass(frozen=True)
class SignalConfig:
    kind: str
    t1: float
    amplitude: float = 1.0
    cycles: int = 1


@dataclass(frozen=True)
class DirichletConfig:
    axis: str
    value: float
    components: tuple[str, ...] = ("x", "y", "z")


@dataclass(frozen=True)
class NeumannConfig:
    kind: str
    signal: str
    name: str
    axis: str | None = None
    value: float | None = None
    traction: tuple[float, float, float] | None = None
    force: tuple[float, float, float] | None = None
    point: tuple[float, float, float] | None = None
    node: int | None = None


@dataclass(frozen=True)
class ProbeConfig:
    name: str
    point: tuple[float, float, float] | None = None
    node: int | None = None


@dataclass(frozen=True)
class TimeConfig:
    duration: float
    dt: float | None = None
    alpha: float = 0.0
    safety: float = 0.95


@dataclass(frozen=True)
class OutputConfig:
    directory: Path
    history_every: int = 1
    snapshot_every: int = 0
    vtk: bool = True


@dataclass(frozen=True)
class PartitionConfig:
    parts: int = 1
    method: str = "auto"
    spectral_dof_threshold: float = 5_000_000


@dataclass(frozen=True)
class WorkersConfig:
    count: int = 1
    backend: str = "sim"
    ordered_reduction: bool = True
    timeout: float = 600.0


@dataclass(frozen=True)
class RunConfig:
    source: Path | None
    mesh: MeshConfig
    materials: dict[int, dict[str, float]]
    time: TimeConfig
    signals: dict[str, SignalConfig] = field(default_factory=dict)
    dirichlet: tuple[DirichletConfig, ...] = ()
    neumann: tuple[NeumannConfig, ...] = ()
    initial_displacement: tuple[float, float, float] | None = None
    initial_velocity: tuple[float, float, float] | None = None
    probes: tuple[ProbeConfig, ...] = ()
    output: OutputConfig = field(default_factory=lambda: OutputConfig(default_output_dir()))
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    workers: WorkersConfig = field(default_factory=WorkersConfig)


_AXES = ("x", "y", "z")
_SIGNAL_KINDS = ("ricker", "triangle", "sine_burst")


def _parse_primitive(raw: object, where: str, materials: Mapping[int, object]) -> PrimitiveConfig:
    kind = _choice(_section(raw, where, ["type"], ["lower", "upper", "center", "radius", "material"])["type"],
                   f"{where}.type", ("box", "sphere"))
    if kind == "box":
        data = _section(raw, where, ["type", "lower", "upper", "material"])
        primitive = PrimitiveConfig(
            kind, _integer(data["material"], f"{where}.material", 1),
            lower=_vector(data["lower"], f"{where}.lower"), upper=_vector(data["upper"], f"{where}.upper"),
        )
    else:
        data = _section(raw, where, ["type", "center", "radius", "material"])
        primitive = PrimitiveConfig(
            kind, _integer(data["material"], f"{where}.material", 1),
            center=_vector(data["center"], f"{where}.center"),
            radius=_number(data["radius"], f"{where}.radius", positive=True),
        )
    if primitive.material not in materials:
        raise ConfigError(f"{where}.material: material {primitive.material} is not defined")
    return primitive


def _parse_mesh(raw: object, base: Path, materials: Mapping[int, object]) -> MeshConfig:
    data = _section(raw, "mesh", optional=["path", "geometry"])
    if ("path" in data) == ("geometry" in data):
        raise ConfigError("mesh: give exactly one of 'path' or 'geometry'")
    if "path" in data:
        return MeshConfig(path=_path(data["path"], "mesh.path", base))
    geo = _section(
        data["geometry"],
        "mesh.geometry",
        ["root_size", "max_level"],
        ["min_level", "origin", "homogeneity", "refine_boundary", "primitives", "voxels"],
    )
    if ("primitives" in geo) == ("voxels" in geo):
        raise ConfigError("mesh.geometry: give exactly one of 'primitives' or 'voxels'")
    voxels = None
    primitives: tuple[PrimitiveConfig, ...] = ()
    if "voxels" in geo:
        vox = _section(geo["voxels"], "mesh.geometry.voxels", ["path", "spacing"], ["origin"])
        voxels = VoxelConfig(
            path=_path(vox["path"], "mesh.geometry.voxels.path", base),
            spacing=_number(vox["spacing"], "mesh.geometry.voxels.spacing", positive=True),
            origin=_vector(vox.get("origin", [0, 0, 0]), "mesh.geometry.voxels.origin"),
        )
    else:
        if not isinstance(geo["primitives"], list) or not geo["primitives"]:
            raise ConfigError("mesh.geometry.primitives: expected a non-empty list")
        primitives = tuple(
            _parse_primitive(item, f"mesh.geometry.primitives[{k}]", materials)
            for k, item in enumerate(geo["primitives"])
        )
    max_level = _integer(geo["max_level"], "mesh.geometry.max_level", 0)
    min_level = _integer(geo.get("min_level", 0), "mesh.geometry.min_level", 0)
    if max_level < min_level:
        raise ConfigError(f"mesh.geometry: max_level {max_level} is below min_level {min_level}")
    return MeshConfig(
        geometry=GeometryConfig(
            root_size=_number(geo["root_size"], "mesh.geometry.root_size", positive=True),
            max_level=max_level,
            min_level=min_level,
            origin=_vector(geo.get("origin", [0, 0, 0]), "mesh.geometry.origin"),
            homogeneity=bool(geo.get("homogeneity", True)),
            refine_boundary=bool(geo.get("refine_boundary", True)),
            primitives=primitives,
            voxels=voxels,
        )
    )


def _parse_materials(raw: object) -> dict[int, dict[str, float]]:
    if not isinstance(raw, Mapping) or not raw:
        raise ConfigError("materials: expected a non-empty object of id -> {E, nu, rho}")
    table = {}
    for key, value in raw.items():
        where = f"materials.{key}"
        try:
            mid = int(key)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: material ids must be integers") from exc
        if mid <= 0:
            raise ConfigError(f"{where}: material ids must be positive (0 is void)")
        data = _section(value, where, ["E", "nu", "rho"])
        table[mid] = {
            "E": _number(data["E"], f"{where}.E", positive=True),
            "nu": _number(data["nu"], f"{where}.nu"),
            "rho": _number(data["rho"], f"{where}.rho", positive=True),
        }
        if not -1.0 < table[mid]["nu"] < 0.5:
            raise ConfigError(f"{where}.nu: must lie in (-1, 0.5), got {table[mid]['nu']}")
    return table


def _parse_signals(raw: object) -> dict[str, SignalConfig]:
    if not isinstance(raw, Mapping):
        raise ConfigError("signals: expected an object of name -> signal")
    signals = {}
    for name, value in raw.items():
        where = f"signals.{name}"
        data = _section(value, where, ["kind", "t1"], ["amplitude", "cycles"])
        signals[str(name)] = SignalConfig(
            kind=_choice(data["kind"], f"{where}.kind", _SIGNAL_KINDS),
            t1=_number(data["t1"], f"{where}.t1", positive=True),
            amplitude=_number(data.get("amplitude", 1.0), f"{where}.amplitude"),
            cycles=_integer(data.get("cycles", 1), f"{where}.cycles", 1),
        )
    return signals


def _parse_bcs(raw: object, signals: Mapping[str, SignalConfig]) -> tuple[tuple[DirichletConfig, ...], tuple[NeumannConfig, ...]]:
    data = _section(raw, "boundary_conditions", optional=["dirichlet", "neumann"])
    dirichlet = []
    for k, item in enumerate(data.get("dirichlet", [])):
        where = f"boundary_conditions.dirichlet[{k}]"
        entry = _section(item, where, ["axis", "value"], ["components"])
        components = entry.get("components", list(_AXES))
        if not isinstance(components, list) or not components:
            raise ConfigError(f"{where}.components: expected a non-empty list of axes")
        dirichlet.append(
            DirichletConfig(
                axis=_choice(entry["axis"], f"{where}.axis", _AXES),
                value=_number(entry["value"], f"{where}.value"),
                components=tuple(_choice(c, f"{where}.components", _AXES) for c in components),
            )
        )
    neumann = []
    for k, item in enumerate(data.get("neumann", [])):
        where = f"boundary_conditions.neumann[{k}]"
        if not isinstance(item, Mapping):
            raise ConfigError(f"{where}: expected an object")
        kind = _choice(item.get("type"), f"{where}.type", ("pressure", "nodal"))
        if kind == "pressure":
            entry = _section(item, where, ["type", "axis", "value", "traction", "signal"], ["name"])
            load = NeumannConfig(
                kind=kind,
                signal=str(entry["signal"]),
                name=str(entry.get("name", f"pressure_{k}")),
                axis=_choice(entry["axis"], f"{where}.axis", _AXES),
                value=_number(entry["value"], f"{where}.value"),
                traction=_vector(entry["traction"], f"{where}.traction"),
            )
        else:
            entry = _section(item, where, ["type", "force", "signal"], ["name", "point", "node"])
            if ("point" in entry) == ("node" in entry):
                raise ConfigError(f"{where}: give exactly one of 'point' or 'node'")
            load = NeumannConfig(
                kind=kind,
                signal=str(entry["signal"]),
                name=str(entry.get("name", f"nodal_{k}")),
                force=_vector(entry["force"], f"{where}.force"),
                point=_vector(entry["point"], f"{where}.point") if "point" in entry else None,
                node=_integer(entry["node"], f"{where}.node", 0) if "node" in entry else None,
            )
        if load.signal not in signals:
            raise ConfigError(f"{where}.signal: signal {load.signal!r} is not defined")
        neumann.append(load)
    return tuple(dirichlet), tuple(neumann)


def _parse_probes(raw: object) -> tuple[ProbeConfig, ...]:
    if not isinstance(raw, list):
        raise ConfigError("probes: expected a list")
    probes = []
    for k, item in enumerate(raw):
        where = f"probes[{k}]"
        entry = _section(item, where, ["name"], ["point", "node"])
        if ("point" in entry) == ("node" in entry):
            raise ConfigError(f"{where}: give exactly one of 'point' or 'node'")
        probes.append(
            ProbeConfig(
                name=str(entry["name"]),
                point=_vector(entry["point"], f"{where}.point") if "point" in entry else None,
                node=_integer(entry["node"], f"{where}.node", 0) if "node" in entry else None,
            )
        )
    names = [p.name for p in probes]
    if len(set(names)) != len(names):
        raise ConfigError("probes: names must be unique")
    return tuple(probes)


def parse_run_config(raw: object, base: Path = Path("."), source: Path | None = None) -> RunConfig:
    """Validate a decoded JSON document; relative paths resolve against ``base``."""

    data = _section(
        raw,
        "config",
        ["mesh", "materials", "time"],
        ["signals", "boundary_conditions", "initial_conditions", "probes", "output", "partition", "workers"],
    )
    materials = _parse_materials(data["materials"])
    mesh = _parse_mesh(data["mesh"], base, materials)
    signals = _parse_signals(data.get("signals", {}))
    dirichlet, neumann = _parse_bcs(data.get("boundary_conditions", {}), signals)

    initial = _section(data.get("initial_conditions", {}), "initial_conditions", optional=["displacement", "velocity"])
    time = _section(data["time"], "time", ["duration"], ["dt", "alpha", "safety"])
    time_config = TimeConfig(
        duration=_number(time["duration"], "time.duration", positive=True),
        dt=_number(time["dt"], "time.dt", positive=True) if time.get("dt") is not None else None,
        alpha=_number(time.get("alpha", 0.0), "time.alpha"),
        safety=_number(time.get("safety", 0.95), "time.safety", positive=True),
    )
    if time_config.alpha < 0 or time_config.safety > 1.0:
        raise ConfigError("time: alpha must be >= 0 and safety must lie in (0, 1]")

    output = _section(data.get("output", {}), "output", optional=["directory", "history_every", "snapshot_every", "vtk"])
    partition = _section(data.get("partition", {}), "partition", optional=["parts", "method", "spectral_dof_threshold"])
    workers = _section(data.get("workers", {}), "workers", optional=["count", "backend", "ordered_reduction", "timeout"])
    parts = _integer(partition.get("parts", 1), "partition.parts", 1)
    if parts & (parts - 1):
        raise ConfigError(f"partition.parts: must be a power of two, got {parts}")

    return RunConfig(
        source=source,
        mesh=mesh,
        materials=materials,
        time=time_config,
        signals=signals,
        dirichlet=dirichlet,
        neumann=neumann,
        initial_displacement=(
            _vector(initial["displacement"], "initial_conditions.displacement") if "displacement" in initial else None
        ),
        initial_velocity=_vector(initial["velocity"], "initial_conditions.velocity") if "velocity" in initial else None,
        probes=_parse_probes(data.get("probes", [])),
        output=OutputConfig(
            directory=_path(output["directory"], "output.directory", base) if "directory" in output else default_output_dir(),
            history_every=_integer(output.get("history_every", 1), "output.history_every", 1),
            snapshot_every=_integer(output.get("snapshot_every", 0), "output.snapshot_every", 0),
            vtk=bool(output.get("vtk", True)),
        ),
        partition=PartitionConfig(
            parts=parts,
            method=_choice(partition.get("method", "auto"), "partition.method", ("auto", "spectral", "geometric")),
            spectral_dof_threshold=_number(
                partition.get("spectral_dof_threshold", 5_000_000), "partition.spectral_dof_threshold", positive=True
            ),
        ),
        workers=WorkersConfig(
            count=_integer(workers.get("count", 1), "workers.count", 1),
            backend=_choice(workers.get("backend", default_backend()), "workers.backend", ("sim", "proc")),
            ordered_reduction=bool(workers.get("ordered_reduction", True)),
            timeout=_number(workers.get("timeout", 600.0), "workers.timeout", positive=True),
        ),
    )


def load_run_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(raw, base=path.resolve().parent, source=path)


__all__ = [
    "ConfigError",
    "DirichletConfig",
    "ENV_BACKEND",
    "ENV_CACHE",
    "ENV_OUTPUT_DIR",
    "GeometryConfig",
    "MeshConfig",
    "NeumannConfig",
    "OutputConfig",
    "PartitionConfig",
    "PrimitiveConfig",
    "ProbeConfig",
    "RunConfig",
    "SignalConfig",
    "TimeConfig",
    "VoxelConfig",
    "WorkersConfig",
    "default_backend",
    "default_cache",
    "default_output_dir",
    "load_env",
    "load_run_config",
    "parse_run_config",
]

from __future__ import annotations

import json
import os

import pytest

from octree_wave.config import (
    ENV_BACKEND,
    ENV_CACHE,
    ENV_OUTPUT_DIR,
    ConfigError,
    default_backend,
    default_cache,
    default_output_dir,
    load_env,
    load_run_config,
    parse_run_config,
)


def _minimal() -> dict:
    return {
        "mesh": {
            "geometry": {
                "root_size": 2.0,
                "max_level": 1,
                "primitives": [{"type": "box", "lower": [0, 0, 0], "upper": [2, 2, 2], "material": 1}],
            }
        },
        "materials": {"1": {"E": 200.0, "nu": 0.3, "rho": 8.0}},
        "time": {"duration": 1.0},
    }


def test_load_env_sets_variables(tmp_path, monkeypatch):
    env_file = tmp_path / ".env"
    env_file.write_text(f"{ENV_BACKEND}=proc\n# comment\n{ENV_CACHE}='masters.bin'\n", encoding="utf-8")
    for name in (ENV_BACKEND, ENV_CACHE):
        monkeypatch.setenv(name, "unset")
        monkeypatch.delenv(name)

    assert load_env(env_file) == env_file

    assert os.environ[ENV_BACKEND] == "proc"
    assert default_backend() == "proc"
    assert str(default_cache()) == "masters.bin"


def test_explicit_env_path_does_not_fall_back(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / ".env").write_text(f"{ENV_BACKEND}=proc\n", encoding="utf-8")
    monkeypatch.setenv(ENV_BACKEND, "unset")
    monkeypatch.delenv(ENV_BACKEND)

    assert load_env(tmp_path / "missing.env") is None
    assert ENV_BACKEND not in os.environ
    assert load_env().resolve() == (tmp_path / ".env").resolve()
    assert default_backend() == "proc"


def test_load_env_preserves_existing_values(tmp_path, monkeypatch):
    env_file = tmp_path / ".env"
    env_file.write_text(f"{ENV_OUTPUT_DIR}=elsewhere\n", encoding="utf-8")
    monkeypatch.setenv(ENV_OUTPUT_DIR, "original")

    load_env(env_file)

    assert str(default_output_dir()) == "original"


def test_defaults_without_environment(monkeypatch):
    monkeypatch.delenv(ENV_BACKEND, raising=False)
    monkeypatch.delenv(ENV_CACHE, raising=False)
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)
    assert default_backend() == "sim"
    assert default_cache() is None
    assert str(default_output_dir()) == "artifacts/runs"


def test_minimal_config_gets_defaults(tmp_path):
    config = parse_run_config(_minimal(), base=tmp_path)
    assert config.mesh.geometry.max_level == 1
    assert config.mesh.geometry.primitives[0].upper == (2.0, 2.0, 2.0)
    assert config.materials == {1: {"E": 200.0, "nu": 0.3, "rho": 8.0}}
    assert config.time.dt is None
    assert config.time.safety == 0.95
    assert config.partition.parts == 1
    assert config.workers.ordered_reduction is True
    assert config.output.history_every == 1


def test_sample_configs_parse(configs_dir):
    for name in ("beam", "cube", "frame", "three_material"):
        config = load_run_config(configs_dir / f"{name}.json")
        assert config.source == configs_dir / f"{name}.json"
        assert config.output.directory.is_absolute()
    beam = load_run_config(configs_dir / "beam.json")
    assert [p.name for p in beam.probes] == ["x4", "x8", "x12", "x16"]
    assert beam.neumann[0].traction == (-1.0, 0.0, 0.0)
    assert beam.signals["pulse"].t1 == 0.015


def test_relative_paths_resolve_against_the_config(tmp_path):
    raw = _minimal()
    raw["mesh"] = {"path": "meshes/block.owm"}
    raw["output"] = {"directory": "out"}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    config = load_run_config(path)
    assert config.mesh.path == tmp_path.resolve() / "meshes" / "block.owm"
    assert config.output.directory == tmp_path.resolve() / "out"


@pytest.mark.parametrize(
    "patch, message",
    [
        ({"extra": 1}, "unknown key"),
        ({"materials": {"0": {"E": 1.0, "nu": 0.3, "rho": 1.0}}}, "void"),
        ({"materials": {"1": {"E": 1.0, "nu": 0.5, "rho": 1.0}}}, "nu"),
        ({"time": {"duration": -1.0}}, "positive"),
        ({"time": {"duration": 1.0, "safety": 2.0}}, "safety"),
        ({"partition": {"parts": 3}}, "power of two"),
        ({"workers": {"backend": "mpi"}}, "workers.backend"),
        ({"probes": [{"name": "a", "node": 0}, {"name": "a", "node": 1}]}, "unique"),
        ({"probes": [{"name": "a"}]}, "exactly one"),
    ],
)
def test_invalid_configs(patch, message):
    raw = _minimal()
    raw.update(patch)
    with pytest.raises(ConfigError, match=message):
        parse_run_config(raw)


def test_loads_must_name_defined_signals():
    raw = _minimal()
    raw["boundary_conditions"] = {
        "neumann": [{"type": "pressure", "axis": "x", "value": 2.0, "traction": [1, 0, 0], "signal": "missing"}]
    }
    with pytest.raises(ConfigError, match="not defined"):
        parse_run_config(raw)


def test_mesh_needs_exactly_one_source():
    raw = _minimal()
    raw["mesh"]["path"] = "mesh.owm"
    with pytest.raises(ConfigError, match="exactly one"):
        parse_run_config(raw)
    raw = _minimal()
    raw["mesh"]["geometry"]["primitives"][0]["material"] = 7
    with pytest.raises(ConfigError, match="material 7"):
        parse_run_config(raw)


def test_missing_or_broken_files(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_run_config(tmp_path / "nope.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(broken)

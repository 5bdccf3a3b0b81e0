from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import uniform_cells

from octree_wave.octree_mesh import Material, MaterialTable, enumerate_nodes, mesh_from_cells
from octree_wave.pattern_catalog import build_master_cell
from octree_wave.time_integrator import (
    DivergenceError,
    DivergenceMonitor,
    StateTriplet,
    TimeSettings,
    cdm_step,
    critical_time_step,
    init_history,
    initial_acceleration,
)


def _oscillator_error(dt: float, duration: float) -> float:
    mass = np.array([1.0])
    stiffness = 1.0
    u0 = np.array([1.0])
    v0 = np.zeros(1)
    a0 = initial_acceleration(mass, np.zeros(1), stiffness * u0, v0)
    previous, current = init_history(u0, v0, a0, dt), u0.copy()
    steps = int(round(duration / dt))
    for n in range(steps):
        nxt = cdm_step(previous, current, np.zeros(1), stiffness * current, mass, 0.0, dt, step=n)
        previous, current = current, nxt
    return abs(float(current[0]) - math.cos(steps * dt))


def test_init_history():
    assert init_history(0.0, 1.0, 0.0, 0.1) == pytest.approx(-0.1)
    u = init_history(np.ones(2), np.zeros(2), np.full(2, 2.0), 0.5)
    assert u.tolist() == [1.25, 1.25]
    with pytest.raises(ValueError):
        init_history(np.ones(2), np.ones(3), np.ones(2), 0.1)


def test_oscillator_over_one_period():
    assert _oscillator_error(0.01, 2.0 * math.pi) < 1e-3


def test_central_difference_is_second_order():
    coarse = _oscillator_error(0.01, 1.0)
    fine = _oscillator_error(0.005, 1.0)
    assert coarse / fine == pytest.approx(4.0, rel=0.2)


def test_damping_at_two_over_dt_drops_the_oldest_state():
    dt = 0.1
    previous = np.array([123.0])
    current = np.array([1.0])
    out = cdm_step(previous, current, np.zeros(1), np.zeros(1), np.ones(1), 2.0 / dt, dt)
    other = cdm_step(np.array([-7.0]), current, np.zeros(1), np.zeros(1), np.ones(1), 2.0 / dt, dt)
    assert out[0] == pytest.approx(1.0)
    assert other[0] == out[0]


def test_step_is_local_per_dof():
    rng = np.random.default_rng(3)
    arrays = [rng.normal(size=12) for _ in range(4)]
    mass = rng.uniform(1.0, 2.0, size=12)
    whole = cdm_step(*arrays, mass, 0.3, 0.01)
    part = np.arange(5, 12)
    piece = cdm_step(*(a[part] for a in arrays), mass[part], 0.3, 0.01)
    assert np.array_equal(whole[part], piece)


def test_non_finite_update_raises():
    with pytest.raises(DivergenceError) as info:
        cdm_step(np.zeros(1), np.array([np.inf]), np.zeros(1), np.zeros(1), np.ones(1), 0.0, 0.1, step=7)
    assert info.value.step == 7
    assert info.value.last_stable_step == 6


def _single_cell(density: float = 1.0):
    materials = MaterialTable({1: Material(1.0, 0.3, density)})
    return enumerate_nodes(mesh_from_cells(1.0, uniform_cells(1, 0), materials))


def test_critical_step_of_a_unit_cell(catalog):
    master = build_master_cell(1, 0.3)
    assert critical_time_step(_single_cell(), catalog) == pytest.approx(2.0 / master.omega_max)
    assert critical_time_step(_single_cell(4.0), catalog) == pytest.approx(4.0 / master.omega_max)


def test_critical_step_takes_the_smallest_cell(catalog, refined_mesh, cube_mesh_2):
    assert critical_time_step(refined_mesh, catalog) < critical_time_step(cube_mesh_2, catalog)


def _free_cell_run(dt: float, steps: int) -> float:
    master = build_master_cell(1, 0.3)
    rng = np.random.default_rng(11)
    current = rng.uniform(-1.0, 1.0, size=master.n_dof)
    previous = current.copy()
    monitor = DivergenceMonitor(1.0)
    zero = np.zeros(master.n_dof)
    for n in range(steps):
        nxt = cdm_step(previous, current, zero, master.stiffness @ current, master.lumped_mass, 0.0, dt, step=n)
        monitor.check(nxt, n)
        previous, current = current, nxt
    return float(np.max(np.abs(current)))


def test_stable_below_the_critical_step():
    dt_cr = 2.0 / build_master_cell(1, 0.3).omega_max
    assert _free_cell_run(0.99 * dt_cr, 10_000) < 1e3


def test_bounded_at_the_critical_step():
    dt_cr = 2.0 / build_master_cell(1, 0.3).omega_max
    # the top mode sits on the limit and may only grow linearly
    assert _free_cell_run(dt_cr, 10_000) < 1e6


def test_divergence_detected_above_the_critical_step():
    dt_cr = 2.0 / build_master_cell(1, 0.3).omega_max
    with pytest.raises(DivergenceError, match="divergence limit"):
        _free_cell_run(2.0 * dt_cr, 200)


def test_time_settings():
    settings = TimeSettings(duration=1.0)
    assert settings.resolve(0.1) == pytest.approx(0.095)
    assert settings.step_count(0.1) == 10
    assert settings.step_count(0.3) == 4
    with pytest.raises(ValueError):
        TimeSettings(duration=0.0)
    with pytest.raises(ValueError):
        TimeSettings(duration=1.0, alpha=-1.0)
    with pytest.raises(ValueError):
        TimeSettings(duration=1.0, safety=1.5)
    with pytest.raises(ValueError, match="longer than the duration"):
        TimeSettings(duration=0.01, dt=0.1).resolve(1.0)


def test_explicit_step_above_critical_warns(caplog):
    with caplog.at_level("WARNING"):
        assert TimeSettings(duration=1.0, dt=0.2).resolve(0.1) == 0.2
    assert "exceeds the critical step" in caplog.text


def test_state_triplet_rotates_buffers():
    triplet = StateTriplet(np.zeros(2), np.ones(2), np.full(2, 2.0))
    oldest = triplet.previous
    triplet.rotate()
    assert triplet.current.tolist() == [2.0, 2.0]
    assert triplet.next is oldest
    with pytest.raises(ValueError):
        StateTriplet(np.zeros(2), np.zeros(3), np.zeros(2))

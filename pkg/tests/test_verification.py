from __future__ import annotations

import math

import numpy as np
import pytest

from octree_wave.excitation import Signal
from octree_wave.octree_mesh import MeshError, is_balanced
from octree_wave.verification import (
    CubeSpec,
    beam_1d_reference,
    beam_convergence,
    beam_mesh,
    beam_problem,
    cube_convergence,
    cube_eigenfrequencies,
    cube_mesh,
    fitted_slope,
    history_error,
    modal_error,
    modal_frequencies,
    roller_dofs,
)


def test_cube_reference_frequencies():
    values = cube_eigenfrequencies(CubeSpec(), 6)
    assert np.all(np.diff(values) >= 0.0)
    assert values[:3] == pytest.approx([10.89] * 3, abs=5e-3)
    assert values[3:] == pytest.approx([13.018] * 3, abs=5e-4)


def test_cube_variants_agree_without_poisson_effect():
    spec = CubeSpec(poisson_ratio=0.0)
    assert np.allclose(cube_eigenfrequencies(spec, 30), cube_eigenfrequencies(spec, 30, variant="elastic"))
    stiff = cube_eigenfrequencies(CubeSpec(), 40, variant="elastic")
    assert stiff[0] == pytest.approx(10.89, abs=5e-3)
    with pytest.raises(ValueError):
        cube_eigenfrequencies(spec, 0)
    with pytest.raises(ValueError, match="variant"):
        cube_eigenfrequencies(spec, 3, variant="plate")
    with pytest.raises(MeshError):
        CubeSpec(length=0.0)


def test_cube_reference_counts_degenerate_modes():
    values = cube_eigenfrequencies(CubeSpec(poisson_ratio=0.0), 200)
    assert values.size == 200
    assert np.all(np.diff(values) >= 0.0)


def test_error_norms():
    reference = np.array([10.0, 20.0, 30.0])
    assert modal_error(1.01 * reference, reference) == pytest.approx(0.01)
    assert modal_error(reference, reference) == 0.0
    with pytest.raises(ValueError):
        modal_error(reference[:2], reference)
    history = np.arange(1.0, 7.0).reshape(3, 2)
    assert history_error(0.98 * history, history) == pytest.approx(0.02)
    with pytest.raises(ValueError, match="zero"):
        history_error(history, np.zeros_like(history))


def test_fitted_slope():
    x = np.array([100.0, 200.0, 400.0])
    assert fitted_slope(x, 3.0 * x**-2) == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        fitted_slope([1.0], [1.0])


@pytest.mark.parametrize("mesh_type", [1, 2, 3])
def test_cube_meshes(mesh_type):
    mesh = cube_mesh(2, mesh_type)
    assert is_balanced(mesh)
    assert mesh.volume() == pytest.approx(512.0)
    assert mesh.n_cells == (8 if mesh_type == 1 else 36)
    with pytest.raises(MeshError):
        cube_mesh(2, 4)


def test_roller_dofs_fix_normal_components():
    mesh = cube_mesh(2)
    fixed = roller_dofs(mesh, (0.0, 0.0, 0.0), (8.0, 8.0, 8.0))
    # 9 nodes per face, one normal component each, no double counting
    assert fixed.size == 6 * 9
    nodes, components = fixed // 3, fixed % 3
    for node, component in zip(nodes, components):
        assert mesh.nodes[node][component] in (0.0, 8.0)


def test_coarse_cube_frequencies_are_close(catalog):
    mesh = cube_mesh(4)
    fixed = roller_dofs(mesh, (0.0, 0.0, 0.0), (8.0, 8.0, 8.0))
    lumped = modal_frequencies(mesh, catalog, 3, fixed)
    consistent = modal_frequencies(mesh, catalog, 3, fixed, mass="consistent")
    assert lumped == pytest.approx([10.89] * 3, rel=0.1)
    assert np.all(lumped < consistent)
    with pytest.raises(ValueError):
        modal_frequencies(mesh, catalog, 3, fixed, mass="diagonal")


def test_rod_reference_travels_at_the_bar_speed():
    times = np.linspace(0.0, 0.1, 101)
    disp, acc = beam_1d_reference(1e4, 1.0, 16.0, Signal("triangle", 0.01), [0.0, 4.0, 12.0], times)
    assert disp.shape == acc.shape == (101, 3)
    assert np.all(disp[:, 0] == 0.0)
    # impulse of the traction pulse times c / E
    assert disp[80, 2] == pytest.approx(1e-4, rel=0.03)
    assert np.max(np.abs(disp[:, 1])) < 1e-2 * disp[80, 2]


def test_rod_reference_rejects_bad_grids():
    with pytest.raises(ValueError):
        beam_1d_reference(1e4, 1.0, 16.0, Signal("ricker", 0.015), [4.0], np.array([0.1, 0.2]))
    with pytest.raises(ValueError, match="uniform"):
        beam_1d_reference(1e4, 1.0, 16.0, Signal("ricker", 0.015), [4.0], np.array([0.0, 0.1, 0.3]))
    with pytest.raises(ValueError, match="max_frequency"):
        beam_1d_reference(1e4, 1.0, 16.0, math.sin, [4.0], np.array([0.0, 0.1]))


def test_beam_mesh_and_problem(catalog):
    mesh = beam_mesh(0.5)
    assert mesh.n_cells == 32 * 2 * 2
    assert mesh.volume() == pytest.approx(16.0)
    with pytest.raises(MeshError):
        beam_mesh(0.3)
    problem = beam_problem(1.0, Signal("ricker", 0.015), 0.05, catalog)
    assert [p.name for p in problem.probes] == ["x4", "x8", "x12", "x16"]
    assert problem.mesh.nodes[problem.probes[-1].node][0] == 16.0
    assert problem.bcs.loads[0].amplitudes.sum() == pytest.approx(-1.0)


@pytest.mark.slow
def test_cube_modal_error_converges(catalog):
    study = cube_convergence(sizes=(4, 6, 8), count=20, catalog=catalog)
    lumped = [row.error for row in study.rows if row.label == "lumped"]
    assert lumped == sorted(lumped, reverse=True)
    assert study.slope("lumped") < -0.4


@pytest.mark.slow
def test_beam_history_error_decreases(catalog):
    study = beam_convergence(sizes=(0.5, 0.25), catalog=catalog)
    for label in ("displacement", "acceleration"):
        errors = [row.error for row in study.rows if row.label == label]
        assert errors[1] < errors[0]

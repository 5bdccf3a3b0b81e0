from __future__ import annotations

import numpy as np
import pytest

from octree_wave.assembly_engine import (
    AssemblyError,
    BoundaryConditions,
    InitialConditions,
    NeumannLoad,
    Probe,
    TransientProblem,
    TransientSolver,
    apply_bcs,
    build_solver_tables,
    dirichlet_dofs,
    element_forces,
    internal_force,
    nodal_load,
    plane_nodes,
    pressure_load,
    probe_at,
    reduce_forces,
    restrict_tables,
    surface_shape_integrals,
)
from octree_wave.excitation import Signal
from octree_wave.time_integrator import TimeSettings, cdm_step
from octree_wave.verification import assemble_global

PULSE = Signal("ricker", 0.5)


def _random_field(n_dof: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=n_dof)


@pytest.mark.parametrize("ordered", [True, False])
def test_element_by_element_force_matches_assembled_stiffness(refined_mesh, catalog, ordered):
    tables = build_solver_tables(refined_mesh, catalog)
    stiffness, _ = assemble_global(refined_mesh, tables)
    u = _random_field(tables.n_dof)
    expected = stiffness @ u
    assert np.allclose(internal_force(tables, u, ordered), expected, rtol=1e-10, atol=1e-10 * np.abs(expected).max())


def test_global_stiffness_has_six_rigid_modes(two_material_mesh, catalog):
    tables = build_solver_tables(two_material_mesh, catalog)
    stiffness, _ = assemble_global(two_material_mesh, tables)
    k = stiffness.toarray()
    assert np.allclose(k, k.T, atol=1e-12 * np.abs(k).max())
    eig = np.linalg.eigvalsh(k)
    assert np.count_nonzero(eig < 1e-8 * eig[-1]) == 6
    assert eig[0] > -1e-8 * eig[-1]


def test_lumped_mass_sums_to_total_mass(two_material_mesh, cube_mesh_2, catalog):
    tables = build_solver_tables(two_material_mesh, catalog)
    for d in range(3):
        assert tables.mass[d::3].sum() == pytest.approx(8.0 * 4.0 + 2.7 * 4.0)
    uniform = build_solver_tables(cube_mesh_2, catalog)
    assert np.allclose(uniform.mass.reshape(-1, 3).sum(axis=0), 64.0)
    assert np.all(uniform.mass > 0)


def test_ordered_and_blas_products_agree(refined_mesh, catalog):
    tables = build_solver_tables(refined_mesh, catalog)
    u = _random_field(tables.n_dof, seed=5)
    a = element_forces(tables, u, ordered=True)
    b = element_forces(tables, u, ordered=False)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12 * np.abs(a).max())
    assert np.array_equal(reduce_forces(tables, a), internal_force(tables, u))


def test_restricted_tables_reproduce_their_share(refined_mesh, catalog):
    tables = build_solver_tables(refined_mesh, catalog)
    u = _random_field(tables.n_dof, seed=2)
    full = element_forces(tables, u)
    subset = np.arange(0, refined_mesh.n_cells, 2)
    local, dofs, positions = restrict_tables(tables, subset)
    assert local.n_elements == subset.size
    assert np.array_equal(element_forces(local, u[dofs]), full[positions])
    assert np.array_equal(local.mass, tables.mass[dofs])
    with pytest.raises(AssemblyError):
        restrict_tables(tables, np.array([refined_mesh.n_cells + 3]))


def test_pressure_load_integrates_to_traction_times_area(cube_mesh_2, refined_mesh):
    load = pressure_load(cube_mesh_2, "x", 2.0, (-1.0, 0.0, 0.0), PULSE)
    assert load.amplitudes.sum() == pytest.approx(-4.0)
    assert np.all(load.dofs % 3 == 0)
    per_node = np.bincount(load.dofs // 3, weights=load.amplitudes, minlength=cube_mesh_2.n_nodes)
    centre = int(np.argmin(np.linalg.norm(cube_mesh_2.nodes - [2.0, 1.0, 1.0], axis=1)))
    assert per_node[centre] == pytest.approx(-1.0)

    shear = pressure_load(refined_mesh, "x", 0.0, (0.0, 0.0, 3.0), PULSE)
    assert shear.amplitudes.sum() == pytest.approx(12.0)
    with pytest.raises(AssemblyError, match="no exposed faces"):
        pressure_load(refined_mesh, "x", 1.0, (1.0, 0.0, 0.0), PULSE)


def test_surface_shape_integrals():
    square = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 2.0, 0.0], [0.0, 2.0, 0.0]])
    assert np.allclose(surface_shape_integrals("quad", square), 1.0)
    triangle = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert np.allclose(surface_shape_integrals("triangle", triangle), 1.0 / 6.0)


def test_dirichlet_and_nodal_selection(cube_mesh_2):
    assert plane_nodes(cube_mesh_2, "x", 0.0).size == 9
    assert dirichlet_dofs(cube_mesh_2, "x", 0.0).size == 27
    only_x = dirichlet_dofs(cube_mesh_2, 0, 0.0, components=("x",))
    assert np.all(only_x % 3 == 0)
    with pytest.raises(AssemblyError, match="no nodes"):
        dirichlet_dofs(cube_mesh_2, "x", 5.0)
    with pytest.raises(AssemblyError, match="unknown axis"):
        plane_nodes(cube_mesh_2, "w", 0.0)

    load = nodal_load(cube_mesh_2, (0.0, 0.0, -2.0), PULSE, point=(1.1, 0.9, 2.0))
    node = load.dofs[0] // 3
    assert np.allclose(cube_mesh_2.nodes[node], [1.0, 1.0, 2.0])
    assert load.amplitudes.tolist() == [-2.0]
    with pytest.raises(AssemblyError, match="exactly one"):
        nodal_load(cube_mesh_2, (1.0, 0.0, 0.0), PULSE)
    with pytest.raises(AssemblyError, match="outside the mesh"):
        nodal_load(cube_mesh_2, (1.0, 0.0, 0.0), PULSE, node=999)


def test_boundary_condition_validation(cube_mesh_2):
    fixed = dirichlet_dofs(cube_mesh_2, "x", 0.0)
    clash = NeumannLoad(dofs=fixed[:1], amplitudes=np.ones(1), signal=PULSE, name="clash")
    with pytest.raises(AssemblyError, match="also fixed"):
        BoundaryConditions(fixed=fixed, loads=(clash,)).validate(cube_mesh_2.n_dof)
    with pytest.raises(AssemblyError, match="outside"):
        BoundaryConditions(fixed=np.array([cube_mesh_2.n_dof])).validate(cube_mesh_2.n_dof)
    with pytest.raises(AssemblyError, match="matching"):
        NeumannLoad(dofs=np.arange(2), amplitudes=np.ones(3), signal=PULSE)


def test_apply_bcs_adds_load_and_zeroes_fixed():
    load = NeumannLoad(dofs=np.array([4]), amplitudes=np.array([2.0]), signal=Signal("triangle", 1.0))
    bcs = BoundaryConditions(fixed=np.array([0, 1]), loads=(load,))
    force, constrained = apply_bcs(np.ones(6), np.full(6, 3.0), bcs, 1.0)
    assert force.tolist() == [1.0, 1.0, 1.0, 1.0, 3.0, 1.0]
    assert constrained.tolist() == [0.0, 0.0, 3.0, 3.0, 3.0, 3.0]


def test_solver_step_uses_apply_bcs(cube_mesh_2, catalog):
    initial = InitialConditions.uniform(cube_mesh_2.n_dof, velocity=(0.1, 0.0, 0.0))
    problem = _bar_problem(cube_mesh_2, catalog, initial=initial)
    solver = TransientSolver(problem)
    state = solver.initial_state()
    assert np.all(state.current[problem.bcs.fixed] == 0.0)
    assert np.all(state.previous[problem.bcs.fixed] == 0.0)

    t = state.step * solver.dt
    external, _ = apply_bcs(np.zeros(solver.n_dof), state.current, problem.bcs, t)
    internal = internal_force(solver.tables, state.current)
    expected = cdm_step(state.previous, state.current, external, internal, solver.tables.mass, 0.0, solver.dt)
    _, expected = apply_bcs(np.zeros(solver.n_dof), expected, problem.bcs, t)

    stepped = solver.run(state, n_steps=1).state
    assert stepped.step == 1
    assert np.array_equal(stepped.current, expected)
    assert np.array_equal(stepped.previous, state.current)


def test_initial_conditions_shapes():
    u, v = InitialConditions.uniform(6, velocity=(0.0, 0.0, 1.0)).vectors(6)
    assert u.tolist() == [0.0] * 6
    assert v.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0, 1.0]
    with pytest.raises(AssemblyError, match="expected"):
        InitialConditions(displacement=np.zeros(5)).vectors(6)


def _bar_problem(mesh, catalog, **kwargs) -> TransientProblem:
    load = pressure_load(mesh, "x", 2.0, (-1.0, 0.0, 0.0), PULSE)
    bcs = BoundaryConditions(fixed=dirichlet_dofs(mesh, "x", 0.0), loads=(load,))
    probes = (probe_at(mesh, "tip", (2.0, 1.0, 1.0)), probe_at(mesh, "root", (0.0, 0.0, 0.0)))
    return TransientProblem(mesh=mesh, catalog=catalog, time=TimeSettings(duration=2.0), bcs=bcs, probes=probes, **kwargs)


def test_transient_run_respects_supports(cube_mesh_2, catalog):
    solver = TransientSolver(_bar_problem(cube_mesh_2, catalog, snapshot_every=4))
    assert solver.dt == pytest.approx(0.95 * solver.critical_dt)
    result = solver.run()
    assert result.n_steps == solver.n_steps
    tip, root = result.histories["tip"], result.histories["root"]
    assert tip.times.size == solver.n_steps + 1
    assert tip.displacement.shape == (solver.n_steps + 1, 3)
    assert np.all(root.displacement == 0.0)
    assert np.max(np.abs(tip.displacement[:, 0])) > 0.0
    assert np.all(result.state.current[solver.fixed] == 0.0)
    assert [s.step for s in result.snapshots] == list(range(0, solver.n_steps + 1, 4))
    assert result.snapshots[0].displacement.shape == (27, 3)


def test_zero_load_gives_zero_response(cube_mesh_2, catalog):
    problem = TransientProblem(
        mesh=cube_mesh_2,
        catalog=catalog,
        time=TimeSettings(duration=1.0),
        probes=(Probe("corner", 0),),
    )
    result = TransientSolver(problem).run()
    assert np.all(result.state.current == 0.0)
    assert np.all(result.histories["corner"].acceleration == 0.0)


def test_response_is_linear_in_the_load(cube_mesh_2, catalog):
    base = TransientSolver(_bar_problem(cube_mesh_2, catalog)).run()
    doubled_problem = _bar_problem(cube_mesh_2, catalog)
    doubled_problem.bcs = BoundaryConditions(
        fixed=doubled_problem.bcs.fixed,
        loads=(pressure_load(cube_mesh_2, "x", 2.0, (-2.0, 0.0, 0.0), PULSE),),
    )
    doubled = TransientSolver(doubled_problem).run()
    assert np.allclose(doubled.state.current, 2.0 * base.state.current, rtol=1e-12, atol=1e-15)


def test_chained_runs_match_a_single_run(cube_mesh_2, catalog):
    solver = TransientSolver(_bar_problem(cube_mesh_2, catalog))
    full = solver.run()
    first = solver.run(n_steps=5)
    second = solver.run(state=first.state, n_steps=solver.n_steps + 1 - 5)
    assert second.state.step == full.state.step
    assert np.array_equal(second.state.current, full.state.current)
    joined = np.concatenate([first.histories["tip"].displacement, second.histories["tip"].displacement])
    assert np.array_equal(joined, full.histories["tip"].displacement)


def test_free_body_conserves_momentum(refined_mesh, catalog):
    u0 = 1e-3 * _random_field(refined_mesh.n_dof, seed=9)
    problem = TransientProblem(
        mesh=refined_mesh,
        catalog=catalog,
        time=TimeSettings(duration=1.0),
        initial=InitialConditions(displacement=u0, velocity=np.tile([0.0, 0.0, 0.01], refined_mesh.n_nodes)),
    )
    result = TransientSolver(problem).run()
    assert result.momentum.shape[1] == 3
    expected = np.array([0.0, 0.0, 0.01 * 8.0 * 8.0])
    assert np.allclose(result.momentum, expected[None, :], atol=1e-9)


def test_solver_rejects_bad_probes(cube_mesh_2, catalog):
    problem = TransientProblem(
        mesh=cube_mesh_2, catalog=catalog, time=TimeSettings(duration=1.0), probes=(Probe("far", 1000),)
    )
    with pytest.raises(AssemblyError, match="outside the mesh"):
        TransientSolver(problem)

from __future__ import annotations

import networkx as nx
import numpy as np
import pytest

from conftest import uniform_cells

from octree_wave.octree_mesh import enumerate_nodes, mesh_from_cells
from octree_wave.partitioner import (
    SPECTRAL_DOF_THRESHOLD,
    DualGraph,
    PartitionError,
    choose_method,
    dual_graph,
    geometric_bisect,
    interface_sets,
    mesh_element_nodes,
    partition,
    partition_graph,
    principal_axis,
    spectral_bisect,
)


def _quadtree_boxes() -> tuple[np.ndarray, np.ndarray]:
    """Three 2x2 roots side by side: coarse, split once, split with one quadrant split again."""

    boxes = [((0.0, 0.0), (2.0, 2.0))]
    for x in (2.0, 3.0):
        for y in (0.0, 1.0):
            boxes.append(((x, y), (x + 1.0, y + 1.0)))
    for x in (4.0, 4.5):
        for y in (0.0, 0.5):
            boxes.append(((x, y), (x + 0.5, y + 0.5)))
    boxes += [((4.0, 1.0), (5.0, 2.0)), ((5.0, 0.0), (6.0, 1.0)), ((5.0, 1.0), (6.0, 2.0))]
    lower = np.array([b[0] for b in boxes])
    upper = np.array([b[1] for b in boxes])
    return lower, upper


def _box_adjacency(lower: np.ndarray, upper: np.ndarray, tol: float = 1e-12) -> list[tuple[int, int]]:
    """Pairs of axis-aligned boxes sharing a side of positive length."""

    pairs = []
    for a in range(len(lower)):
        for b in range(a + 1, len(lower)):
            overlap = np.minimum(upper[a], upper[b]) - np.maximum(lower[a], lower[b])
            touching = np.abs(overlap) <= tol
            if touching.sum() == 1 and np.all(overlap[~touching] > tol):
                pairs.append((a, b))
    return pairs


def _graph_from_boxes(lower: np.ndarray, upper: np.ndarray) -> DualGraph:
    graph = nx.Graph()
    graph.add_nodes_from(range(len(lower)))
    graph.add_edges_from(_box_adjacency(lower, upper))
    return DualGraph(graph, 0.5 * (lower + upper))


def _box_nodes(lower: np.ndarray, upper: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, list[np.ndarray]]:
    """Box corners and, per box, every corner lying on its boundary (hanging points included)."""

    corners = [np.where(np.asarray(bits, dtype=bool), upper, lower) for bits in np.ndindex(2, 2)]
    points = np.unique(np.round(np.concatenate(corners), 12), axis=0)
    element_nodes = []
    for lo, hi in zip(lower, upper):
        inside = np.all((points >= lo - tol) & (points <= hi + tol), axis=1)
        on_side = np.any((np.abs(points - lo) <= tol) | (np.abs(points - hi) <= tol), axis=1)
        element_nodes.append(np.flatnonzero(inside & on_side))
    return points, element_nodes


def _cube_4(steel):
    return enumerate_nodes(mesh_from_cells(4.0, uniform_cells(4, 2), steel))


def test_dual_graph_of_two_cubes(steel):
    mesh = enumerate_nodes(mesh_from_cells(2.0, [(1, (0, 0, 0), 1), (1, (1, 0, 0), 1)], steel))
    dual = dual_graph(mesh)
    assert dual.n_vertices == 2
    assert dual.n_edges == 1
    labels = partition(mesh, 2).labels
    assert sorted(labels.tolist()) == [0, 1]


def test_dual_graph_links_partial_faces(refined_mesh):
    dual = dual_graph(refined_mesh)
    coarse = refined_mesh.keys().index((1, 1, 0, 0))
    fine = [v for v in dual.graph.neighbors(coarse) if refined_mesh.cells[v].level == 2]
    assert len(fine) == 4
    assert dual.centroids.shape == (refined_mesh.n_cells, 3)


def test_quadtree_dual_graph():
    lower, upper = _quadtree_boxes()
    dual = _graph_from_boxes(lower, upper)
    assert dual.n_vertices == 12
    assert dual.n_edges == 19
    assert (0, 1) in _box_adjacency(lower, upper)
    # diagonal contact only
    assert not dual.graph.has_edge(1, 4)


def test_path_graph_splits_in_the_middle():
    first, second = spectral_bisect(nx.path_graph(4))
    halves = {tuple(first.tolist()), tuple(second.tolist())}
    assert halves == {(0, 1), (2, 3)}
    assert [a.tolist() for a in spectral_bisect(nx.path_graph(2))] == [[0], [1]]


def test_disconnected_graph_stays_balanced():
    graph = nx.Graph()
    graph.add_edges_from([(0, 1), (1, 2)])
    graph.add_node(3)
    first, second = spectral_bisect(graph)
    assert first.size == second.size == 2
    assert sorted(first.tolist() + second.tolist()) == [0, 1, 2, 3]


@pytest.mark.parametrize("method", ["spectral", "geometric"])
def test_quadtree_halves_have_six_elements_and_a_small_cut(method):
    lower, upper = _quadtree_boxes()
    _, element_nodes = _box_nodes(lower, upper)
    result = partition_graph(_graph_from_boxes(lower, upper), 2, method, element_nodes)
    assert result.sizes.tolist() == [6, 6]
    assert result.interface_nodes.size <= 6


def test_box_nodes_include_hanging_points():
    lower, upper = _quadtree_boxes()
    points, element_nodes = _box_nodes(lower, upper)
    coarse = points[element_nodes[0]]
    assert len(coarse) == 5
    assert [2.0, 1.0] in coarse.tolist()
    assert len(element_nodes[1]) == 4


def test_geometric_bisect_on_a_line():
    centroids = np.array([[x, 0.0, 0.0] for x in (3.0, 0.0, 2.0, 1.0, 4.0)])
    first, second = geometric_bisect(range(5), centroids)
    assert first.size == 2 and second.size == 3
    assert set(centroids[first, 0].tolist()) in ({0.0, 1.0}, {3.0, 4.0})


def test_principal_axis_prefers_coordinate_axes_on_ties():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert principal_axis(square).tolist() == [1.0, 0.0]
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    assert np.allclose(np.abs(principal_axis(line)), np.sqrt(0.5))


def test_cube_splits_into_slabs(steel):
    mesh = _cube_4(steel)
    halves = partition(mesh, 2, method="geometric")
    assert halves.sizes.tolist() == [32, 32]
    centroids = mesh.centroids()
    assert np.all(centroids[halves.part(0), 0] < 2.0)
    assert np.all(centroids[halves.part(1), 0] > 2.0)
    assert halves.interface_nodes.size == 25
    assert list(halves.interfaces) == [(0, 1)]


@pytest.mark.parametrize("method", ["spectral", "geometric"])
def test_four_parts_are_equal(steel, method):
    result = partition(_cube_4(steel), 4, method=method)
    assert result.sizes.tolist() == [16, 16, 16, 16]
    assert result.imbalance == 1.0
    assert result.method == method


def test_single_part_has_no_interface(cube_mesh_2):
    result = partition(cube_mesh_2, 1)
    assert result.sizes.tolist() == [8]
    assert result.interfaces == {}
    assert result.interface_nodes.size == 0


def test_part_count_must_be_a_power_of_two(cube_mesh_2):
    with pytest.raises(PartitionError, match="power of two"):
        partition(cube_mesh_2, 3)
    with pytest.raises(PartitionError, match="cannot split"):
        partition(cube_mesh_2, 16)
    with pytest.raises(PartitionError, match="unknown"):
        partition(cube_mesh_2, 2, method="metis")


def test_interface_sets_match_a_label_scan(refined_mesh):
    labels = np.random.default_rng(4).integers(0, 3, size=refined_mesh.n_cells)
    element_nodes = mesh_element_nodes(refined_mesh)
    sets = interface_sets(element_nodes, labels)
    for (a, b), nodes in sets.items():
        assert a < b
        expected = np.intersect1d(
            np.concatenate([element_nodes[e] for e in np.flatnonzero(labels == a)]),
            np.concatenate([element_nodes[e] for e in np.flatnonzero(labels == b)]),
        )
        assert nodes.tolist() == expected.tolist()
    with pytest.raises(PartitionError):
        interface_sets(element_nodes[:-1], labels)


def test_auto_method_switches_on_size():
    assert choose_method(1000) == "spectral"
    assert choose_method(SPECTRAL_DOF_THRESHOLD) == "geometric"
    assert choose_method(10, threshold=5) == "geometric"
    assert choose_method(10_000_000, method="spectral") == "spectral"

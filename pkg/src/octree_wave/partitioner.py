"""Dual-graph partitioning of octree meshes by recursive bisection.

Every element becomes a graph vertex; face-adjacent elements (including the
partial faces between levels) are joined by an edge. Each bisection splits a
vertex set at its median along either the Fiedler vector of the graph
Laplacian or the principal axis of the element centroids. The communication
cost of a partition is its node cut: the mesh nodes used by elements of more
than one part.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np
import scipy.linalg

from .octree_mesh import CellIndex, OctreeMesh

logger = logging.getLogger(__name__)

SPECTRAL_DOF_THRESHOLD = 5_000_000
METHODS = ("auto", "spectral", "geometric")
FIEDLER_TOL = 1e-8


class PartitionError(ValueError):
    """Raised for invalid partition requests or inconsistent partitions."""


@dataclass(frozen=True, eq=False)
class DualGraph:
    graph: nx.Graph
    centroids: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.graph.number_of_nodes()

    @property
    def n_edges(self) -> int:
        return self.graph.number_of_edges()


def _graph(n_vertices: int, edges: Sequence[tuple[int, int]]) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(range(n_vertices))
    graph.add_edges_from(edges)
    return graph


def dual_graph(mesh: OctreeMesh) -> DualGraph:
    edges = CellIndex(mesh).face_adjacency()
    dual = DualGraph(_graph(mesh.n_cells, edges), mesh.centroids())
    logger.debug(f"dual graph: {dual.n_vertices} vertices, {dual.n_edges} edges")
    return dual



def _fiedler_order(graph: nx.Graph) -> list[int]:
    vertices = sorted(graph.nodes)
    if len(vertices) <= 2:
        return vertices
    vector = nx.fiedler_vector(graph, normalized=False, tol=FIEDLER_TOL, method="tracemin_pcg", seed=len(graph))
    value = dict(zip(graph.nodes, vector))
    return sorted(vertices, key=lambda v: (value[v], v))


def spectral_order(graph: nx.Graph) -> list[int]:
    """Vertices ordered component by component, each along its Fiedler vector.

    Components are visited largest first (ties by smallest vertex id).
    """

    components = sorted(nx.connected_components(graph), key=lambda c: (-len(c), min(c)))
    order: list[int] = []
    for component in components:
        order.extend(_fiedler_order(graph.subgraph(sorted(component))))
    return order


def _split(order: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    half = len(order) // 2
    return np.sort(np.asarray(order[:half], dtype=np.int64)), np.sort(np.asarray(order[half:], dtype=np.int64))


def spectral_bisect(graph: nx.Graph) -> tuple[np.ndarray, np.ndarray]:
    """Median split along the Fiedler vector; part sizes differ by at most one."""

    return _split(spectral_order(graph))


def principal_axis(points: np.ndarray) -> np.ndarray:
    """Direction of largest spread; a coordinate axis when the top spread is not unique."""

    centred = points - points.mean(axis=0)
    covariance = centred.T @ centred / max(len(points), 1)
    values, vectors = scipy.linalg.eigh(covariance)
    top = values[-1]
    if len(values) > 1 and top - values[-2] <= 1e-9 * max(abs(top), 1e-300):
        axis = np.zeros(points.shape[1])
        axis[int(np.argmax(np.round(np.diag(covariance), 12)))] = 1.0
        return axis
    return vectors[:, -1]


def geometric_bisect(vertices: Sequence[int], centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Median split of ``vertices`` along the principal axis of their centroids."""

    vertices = np.asarray(vertices, dtype=np.int64)
    if vertices.size <= 1:
        return _split(vertices.tolist())
    points = np.asarray(centroids, dtype=float)[vertices]
    projection = np.round(points @ principal_axis(points), 12)
    order = np.lexsort((vertices, projection))
    return _split(vertices[order].tolist())


@dataclass(frozen=True, eq=False)
class Partition:
    labels: np.ndarray
    n_parts: int
    method: str
    interfaces: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_parts)

    @property
    def interface_nodes(self) -> np.ndarray:
        if not self.interfaces:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(list(self.interfaces.values())))

    @property
    def imbalance(self) -> float:
        sizes = self.sizes
        return float(sizes.max() / sizes.min()) if sizes.min() > 0 else float("inf")

    def part(self, rank: int) -> np.ndarray:
        return np.flatnonzero(self.labels == rank)


def _check_parts(n_parts: int, n_vertices: int) -> int:
    if n_parts < 1 or n_parts & (n_parts - 1):
        raise PartitionError(f"number of parts must be a power of two, got {n_parts}")
    if n_parts > n_vertices:
        raise PartitionError(f"cannot split {n_vertices} element(s) into {n_parts} parts")
    return n_parts.bit_length() - 1


def interface_sets(
    element_nodes: Sequence[np.ndarray], labels: np.ndarray
) -> dict[tuple[int, int], np.ndarray]:
    """Nodes shared by each pair of parts (pairs with a non-empty interface only)."""

    labels = np.asarray(labels, dtype=np.int64)
    if len(element_nodes) != labels.size:
        raise PartitionError(f"{len(element_nodes)} element node lists for {labels.size} labels")
    nodes = np.concatenate([np.asarray(n, dtype=np.int64) for n in element_nodes])
    owners = np.repeat(labels, [len(n) for n in element_nodes])
    n_parts = int(labels.max()) + 1 if labels.size else 1
    pairs = np.unique(nodes * n_parts + owners)
    pair_node, pair_label = pairs // n_parts, pairs % n_parts
    shared = np.flatnonzero(np.bincount(pair_node) >= 2)
    result: dict[tuple[int, int], list[int]] = {}
    for node in shared:
        parts = pair_label[pair_node == node]
        for i, a in enumerate(parts):
            for b in parts[i + 1 :]:
                result.setdefault((int(a), int(b)), []).append(int(node))
    return {key: np.asarray(value, dtype=np.int64) for key, value in sorted(result.items())}


def mesh_element_nodes(mesh: OctreeMesh) -> list[np.ndarray]:
    rows = mesh.numbered().cell_nodes
    return [row[row >= 0] for row in rows]  # type: ignore[union-attr]


def partition_graph(
    dual: DualGraph,
    n_parts: int,
    method: str = "spectral",
    element_nodes: Sequence[np.ndarray] | None = None,
) -> Partition:
    """Recursive bisection of a dual graph into ``n_parts`` (a power of two) parts."""

    if method not in ("spectral", "geometric"):
        raise PartitionError(f"unknown bisection method {method!r}")
    depth = _check_parts(n_parts, dual.n_vertices)
    labels = np.zeros(dual.n_vertices, dtype=np.int64)
    parts = [np.arange(dual.n_vertices, dtype=np.int64)]
    for _ in range(depth):
        halves = []
        for vertices in parts:
            if method == "spectral":
                first, second = spectral_bisect(dual.graph.subgraph(vertices.tolist()))
            else:
                first, second = geometric_bisect(vertices, dual.centroids)
            halves.extend([first, second])
        parts = halves
    for rank, vertices in enumerate(parts):
        labels[vertices] = rank
    interfaces = interface_sets(element_nodes, labels) if element_nodes is not None else {}
    return Partition(labels=labels, n_parts=n_parts, method=method, interfaces=interfaces)


def choose_method(n_dof: int, method: str = "auto", threshold: float = SPECTRAL_DOF_THRESHOLD) -> str:
    if method not in METHODS:
        raise PartitionError(f"unknown partition method {method!r}; expected one of {METHODS}")
    if method != "auto":
        return method
    return "spectral" if n_dof < threshold else "geometric"


def partition(
    mesh: OctreeMesh,
    n_parts: int,
    method: str = "auto",
    spectral_dof_threshold: float = SPECTRAL_DOF_THRESHOLD,
) -> Partition:
    """Split a numbered mesh into ``n_parts`` balanced parts with node-cut interfaces."""

    _check_parts(n_parts, mesh.n_cells)
    chosen = choose_method(mesh.n_dof, method, spectral_dof_threshold)
    if n_parts == 1:
        result = Partition(np.zeros(mesh.n_cells, dtype=np.int64), 1, chosen)
    else:
        result = partition_graph(dual_graph(mesh), n_parts, chosen, mesh_element_nodes(mesh))
    logger.info(
        f"✓ Partitioned {mesh.n_cells} element(s) into {n_parts} part(s) ({chosen}); "
        f"sizes {result.sizes.tolist()}, {result.interface_nodes.size} interface node(s)"
    )
    return result


__all__ = [
    "DualGraph",
    "METHODS",
    "Partition",
    "PartitionError",
    "SPECTRAL_DOF_THRESHOLD",
    "choose_method",
    "dual_graph",
    "geometric_bisect",
    "interface_sets",
    "mesh_element_nodes",
    "partition",
    "partition_graph",
    "principal_axis",
    "spectral_bisect",
    "spectral_order",
]

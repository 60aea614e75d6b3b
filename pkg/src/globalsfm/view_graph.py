"""View graph construction, triplet cycle-consistency filtering, connectivity.

Edges are undirected, keyed ``(i, j)`` with ``i < j``, and store the verified
relative rotation ``R`` mapping camera-i coordinates into camera j.  Traversal
in the opposite direction uses the transpose; all cycle math goes through
:func:`edge_rotation` so orientation handling lives in one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import so3_log


@dataclass(frozen=True)
class ViewGraph:
    """Undirected multigraph-free view graph: vertices and verified pair edges."""

    vertices: tuple
    edges: dict

    def __post_init__(self):
        for i, j in self.edges:
            if not i < j:
                raise ValueError(f"edge key {(i, j)} must satisfy i < j")

    def adjacency(self) -> dict:
        adj = {v: set() for v in self.vertices}
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj

    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class CycleErrorRecord:
    """Cycle-error summary of one edge across the triplets that contain it.

    ``errors`` lists the first-stage per-triplet errors (degrees);
    ``median_error`` is taken over the second-stage triplet set when the edge
    reached stage 2, else over ``errors``.  Edges in no triplet carry NaN
    statistics and pass the filter untested.
    """

    edge: tuple
    errors: tuple
    min_error: float
    median_error: float
    kept_stage1: bool
    kept_stage2: bool


def build_view_graph(measurements: list, n_cameras: int = None) -> ViewGraph:
    """Graph from accepted two-view measurements.

    Vertices are the union of edge endpoints, plus ``range(n_cameras)`` when
    given (isolated cameras then appear as singleton components).
    """
    edges = {}
    vertex_set = set(range(n_cameras)) if n_cameras else set()
    for m in measurements:
        i, j = m.pair
        if not i < j:
            raise ValueError(f"measurement pair {(i, j)} must satisfy i < j")
        edges[(i, j)] = m
        vertex_set.update((i, j))
    return ViewGraph(tuple(sorted(vertex_set)), edges)


def edge_rotation(graph: ViewGraph, a: int, b: int) -> np.ndarray:
    """Rotation mapping camera-a coordinates into camera b along edge {a, b}."""
    if a < b:
        return graph.edges[(a, b)].rotation
    return graph.edges[(b, a)].rotation.T


def triplet_cycle_error(r_ij: np.ndarray, r_jk: np.ndarray, r_ki: np.ndarray) -> float:
    """Angle of the loop composition i -> j -> k -> i, in degrees.

    Arguments are the orientation-corrected rotations along the loop (each
    maps the frame of its first index into its second).  Zero for a
    consistent triplet.
    """
    loop = r_ki @ r_jk @ r_ij
    return math.degrees(np.linalg.norm(so3_log(loop)))


def enumerate_triplets(graph: ViewGraph) -> list:
    """All triangles (i, j, k) with i < j < k, via adjacency intersection."""
    adj = graph.adjacency()
    triplets = []
    for i, j in sorted(graph.edges):
        for k in sorted(adj[i] & adj[j]):
            if k > j:
                triplets.append((i, j, k))
    return triplets


def _per_edge_errors(graph: ViewGraph) -> dict:
    """Map edge -> list of cycle errors over the triplets containing it."""
    errors = {edge: [] for edge in graph.edges}
    for i, j, k in enumerate_triplets(graph):
        err = triplet_cycle_error(edge_rotation(graph, i, j),
                                  edge_rotation(graph, j, k),
                                  edge_rotation(graph, k, i))
        errors[(i, j)].append(err)
        errors[(min(j, k), max(j, k))].append(err)
        errors[(min(i, k), max(i, k))].append(err)
    return errors


def two_stage_cycle_filter(graph: ViewGraph, epsilon_deg: float = 7.0) -> tuple:
    """Reject rotation-outlier edges by triplet consistency, in two stages.

    Stage 1 keeps edges whose minimum cycle error over containing triplets is
    below ``epsilon_deg``; stage 2 recomputes triplets on the survivors and
    keeps edges whose median cycle error is below the same threshold.  Edges
    contained in no triplet cannot be tested and are kept.

    Returns:
        (filtered ViewGraph, dict edge -> CycleErrorRecord for every input edge).
    """
    stage1_errors = _per_edge_errors(graph)
    stage1_kept = {e for e, errs in stage1_errors.items()
                   if not errs or min(errs) < epsilon_deg}

    stage1_graph = ViewGraph(graph.vertices,
                             {e: graph.edges[e] for e in sorted(stage1_kept)})
    stage2_errors = _per_edge_errors(stage1_graph)
    stage2_kept = {e for e, errs in stage2_errors.items()
                   if not errs or float(np.median(errs)) < epsilon_deg}

    records = {}
    for edge in graph.edges:
        errs1 = stage1_errors[edge]
        in_stage1 = edge in stage1_kept
        if in_stage1 and stage2_errors[edge]:
            median = float(np.median(stage2_errors[edge]))
        elif errs1:
            median = float(np.median(errs1))
        else:
            median = math.nan
        records[edge] = CycleErrorRecord(
            edge=edge,
            errors=tuple(errs1),
            min_error=min(errs1) if errs1 else math.nan,
            median_error=median,
            kept_stage1=in_stage1,
            kept_stage2=in_stage1 and edge in stage2_kept,
        )
    filtered = ViewGraph(graph.vertices,
                         {e: graph.edges[e]
                          for e in sorted(stage1_kept & stage2_kept)})
    return filtered, records


def largest_connected_component(graph: ViewGraph) -> ViewGraph:
    """Subgraph induced by the largest vertex component (ties: smallest min id)."""
    adj = graph.adjacency()
    seen = set()
    best = None
    for start in sorted(graph.vertices):
        if start in seen:
            continue
        component = set()
        stack = [start]
        while stack:
            v = stack.pop()
            if v in component:
                continue
            component.add(v)
            stack.extend(adj[v] - component)
        seen |= component
        # strictly larger wins; first-found wins ties since vertices are sorted
        if best is None or len(component) > len(best):
            best = component
    if best is None:
        return ViewGraph((), {})
    edges = {e: m for e, m in graph.edges.items() if e[0] in best and e[1] in best}
    return ViewGraph(tuple(sorted(best)), edges)

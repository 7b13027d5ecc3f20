"""Local scene graph construction: candidate edges, contact, support, hierarchy."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .frame_ingest import SegmentObservation
from .scene_model import (
    Geometry,
    SceneGraph,
    assign_layers,
    chebyshev_contact,
    grid_distance_ok,
)

A_SUPPORTS_B = "a_supports_b"
B_SUPPORTS_A = "b_supports_a"
CONTACT_ONLY = "contact_only"
NONE = "none"


@dataclass(frozen=True)
class ConstructConfig:
    edge_distance_threshold: float = 0.5
    contact_tolerance: int = 1
    support_footprint_overlap: float = 0.3
    ground_z_quantile: float = 0.05

    def __post_init__(self):
        if not self.edge_distance_threshold >= 0:
            raise ValueError("edge_distance_threshold must be >= 0")
        if int(self.contact_tolerance) != self.contact_tolerance or self.contact_tolerance < 0:
            raise ValueError("contact_tolerance must be a non-negative integer")
        if not 0.0 <= self.support_footprint_overlap <= 1.0:
            raise ValueError("support_footprint_overlap must be in [0, 1]")
        if not 0.0 <= self.ground_z_quantile <= 1.0:
            raise ValueError("ground_z_quantile must be in [0, 1]")


def _centroid_z(obj) -> float:
    return float(obj.descriptor[0])


def propose_edges(observations: Sequence[SegmentObservation],
                  config: ConstructConfig = ConstructConfig()) -> List[Tuple[int, int]]:
    """Segment-id pairs whose box centers are within the distance threshold.

    Pairs are ``(i, j)`` with ``i < j``, sorted ascending.
    """
    if len(observations) < 2:
        return []
    ids = np.array([o.segment_id for o in observations])
    centers = np.array([o.box.center for o in observations])
    thr = config.edge_distance_threshold
    tree = cKDTree(centers)
    # widen the search slightly, then apply the exact test
    candidates = tree.query_pairs(thr * (1 + 1e-9) + 1e-12, output_type="ndarray")
    pairs = []
    for a, b in candidates.tolist():
        if math.dist(centers[a], centers[b]) <= thr:
            i, j = int(ids[a]), int(ids[b])
            pairs.append((i, j) if i < j else (j, i))
    return sorted(pairs)


def detect_contact(a, b, config: ConstructConfig = ConstructConfig()) -> bool:
    return chebyshev_contact(a.grid, b.grid, int(config.contact_tolerance))


def footprint_overlap(supporter, supported) -> float:
    """Fraction of the supported object's xy cell footprint under the supporter."""
    upper = supported.grid.footprint()
    if not upper:
        return 0.0
    return len(upper & supporter.grid.footprint()) / len(upper)


def infer_support(a, b, config: ConstructConfig = ConstructConfig()) -> str:
    if not detect_contact(a, b, config):
        return NONE
    dz = _centroid_z(a) - _centroid_z(b)
    if abs(dz) < a.grid.resolution / 2:
        return CONTACT_ONLY
    lower, upper, verdict = (a, b, A_SUPPORTS_B) if dz < 0 else (b, a, B_SUPPORTS_A)
    if footprint_overlap(lower, upper) >= config.support_footprint_overlap:
        return verdict
    return CONTACT_ONLY


def contact_cell_count(a, b, tolerance: int) -> int:
    """Cells of ``a`` within Chebyshev ``tolerance`` of some cell of ``b``."""
    rng = range(-tolerance, tolerance + 1)
    offsets = [(dx, dy, dz) for dx in rng for dy in rng for dz in rng]
    cells = b.grid.cells
    return sum(
        1 for i, j, k in a.grid.cells
        if any((i + dx, j + dy, k + dz) in cells for dx, dy, dz in offsets)
    )


def ground_band_top(grids, config: ConstructConfig) -> float:
    """Upper z bound (meters) of the band in which objects count as grounded."""
    lows, highs = [], []
    for g in grids:
        lo, hi = g.cell_bounds()
        lows.append(lo[2] * g.resolution)
        highs.append((hi[2] + 1) * g.resolution)
    zmin, zmax = min(lows), max(highs)
    return zmin + config.ground_z_quantile * (zmax - zmin)


def wire_object_edges(graph: SceneGraph, a_id: int, b_id: int,
                      config: ConstructConfig, proximal: bool) -> None:
    """Add proximal/contact/supports edges between two object nodes."""
    a, b = graph.nodes[a_id], graph.nodes[b_id]
    if proximal:
        graph.add_edge(a_id, b_id, "proximal")
    verdict = infer_support(a, b, config)
    if verdict == NONE:
        return
    graph.add_edge(a_id, b_id, "contact")
    if verdict == A_SUPPORTS_B:
        graph.add_edge(a_id, b_id, "supports")
    elif verdict == B_SUPPORTS_A:
        graph.add_edge(b_id, a_id, "supports")


def connect_ground(graph: SceneGraph, ground_id: int, object_ids: Sequence[int],
                   config: ConstructConfig) -> None:
    """Ground every unsupported object whose lowest cell lies in the ground band."""
    if not object_ids:
        return
    top = ground_band_top([graph.nodes[n].grid for n in object_ids], config)
    for n in object_ids:
        node = graph.nodes[n]
        if graph.in_edges(n, "supports"):
            continue
        lowest = node.grid.cell_bounds()[0][2] * node.grid.resolution
        if lowest <= top:
            graph.add_edge(ground_id, n, "supports")


def build_local_graph(observations: Sequence[SegmentObservation],
                      config: ConstructConfig = ConstructConfig()) -> SceneGraph:
    graph = SceneGraph()
    ground = graph.add_node("virtual_ground")
    obs = sorted(observations, key=lambda o: o.segment_id)
    ids: Dict[int, int] = {}
    for o in obs:
        ids[o.segment_id] = graph.add_node(
            "local_object",
            geometry=Geometry(o.box, o.grid),
            descriptor=o.descriptor,
            class_label=None,
            observation_count=1,
            segment_id=o.segment_id,
        )
    proposed = set(propose_edges(obs, config))
    tol = int(config.contact_tolerance)
    for x in range(len(obs)):
        for y in range(x + 1, len(obs)):
            i, j = obs[x].segment_id, obs[y].segment_id
            is_prox = (i, j) in proposed
            if not is_prox and not grid_distance_ok(obs[x].grid, obs[y].grid, tol):
                continue
            wire_object_edges(graph, ids[i], ids[j], config, is_prox)
    connect_ground(graph, ground, [ids[o.segment_id] for o in obs], config)
    assign_layers(graph)
    return graph


def unique_supporter(graph: SceneGraph, node_id: int, tolerance: int = 1):
    """Single parent for consumers that need a tree.

    Prefers the supporter touching the node over the most cells, then the
    lowest node id; the virtual ground counts as zero contact cells.
    """
    sups = [e.src for e in graph.in_edges(node_id, "supports")]
    if not sups:
        return None
    node = graph.nodes[node_id]

    def key(s):
        sup = graph.nodes[s]
        touch = contact_cell_count(node, sup, tolerance) if sup.geometry is not None else 0
        return (-touch, s)

    return min(sups, key=key)

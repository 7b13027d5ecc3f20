"""Persistent global graph: instance matching, geometry fusion, prior features."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .graph_construct import ConstructConfig, connect_ground, wire_object_edges
from .scene_model import (
    Geometry,
    GraphError,
    SceneGraph,
    assign_layers,
    grid_distance_ok,
    voxel_iou,
    check_resolution,
)

logger = logging.getLogger(__name__)

GEOMETRIC_EDGE_TYPES = ("proximal", "contact", "supports")


@dataclass(frozen=True)
class FusionConfig:
    match_iou_threshold: float = 0.25
    # None: running mean (new observation weighted 1/observation_count)
    descriptor_blend: Optional[float] = None
    class_consistency: bool = False

    def __post_init__(self):
        if not 0.0 <= self.match_iou_threshold <= 1.0:
            raise ValueError("match_iou_threshold must be in [0, 1]")
        if self.descriptor_blend is not None and not 0.0 <= self.descriptor_blend <= 1.0:
            raise ValueError("descriptor_blend must be in [0, 1]")


@dataclass
class MatchResult:
    assignments: List[Tuple[int, int, float]] = field(default_factory=list)
    new_instances: List[int] = field(default_factory=list)


@dataclass
class FuseResult:
    # local node id -> global node id, for every local object of the frame
    local_to_global: Dict[int, int] = field(default_factory=dict)
    same_instance: List[Tuple[int, int]] = field(default_factory=list)
    created: List[int] = field(default_factory=list)
    updated: List[int] = field(default_factory=list)


def new_global_graph() -> SceneGraph:
    g = SceneGraph()
    g.add_node("virtual_ground")
    return g


def ground_node(graph: SceneGraph) -> int:
    grounds = graph.nodes_of_type("virtual_ground")
    if len(grounds) != 1:
        raise GraphError(f"expected exactly one virtual_ground node, found {len(grounds)}")
    return grounds[0].id


def match_instances(local_graph: SceneGraph, global_graph: SceneGraph,
                    config: FusionConfig = FusionConfig()) -> MatchResult:
    """Greedy one-to-one matching by descending voxel IoU.

    Ties are broken by lower ``(global_id, local_id)``.
    """
    locals_ = local_graph.nodes_of_type("local_object")
    globals_ = global_graph.nodes_of_type("global_object")
    candidates = []
    for g in globals_:
        for l in locals_:
            check_resolution(l.grid, g.grid)
            if config.class_consistency and l.class_label and g.class_label \
                    and l.class_label != g.class_label:
                continue
            if not grid_distance_ok(l.grid, g.grid, 0):
                continue
            iou = voxel_iou(l.grid, g.grid)
            if iou > 0 and iou >= config.match_iou_threshold:
                candidates.append((-iou, g.id, l.id))
    candidates.sort()
    used_l, used_g = set(), set()
    result = MatchResult()
    for neg_iou, gid, lid in candidates:
        if gid in used_g or lid in used_l:
            continue
        used_g.add(gid)
        used_l.add(lid)
        result.assignments.append((lid, gid, -neg_iou))
    result.new_instances = [l.id for l in locals_ if l.id not in used_l]
    return result


def _blend(old: np.ndarray, new: np.ndarray, count: int, blend: Optional[float]) -> np.ndarray:
    w = 1.0 / count if blend is None else blend
    return old + w * (new - old)


def fuse_frame(global_graph: SceneGraph, local_graph: SceneGraph, match: MatchResult,
               config: FusionConfig = FusionConfig(),
               construct: ConstructConfig = ConstructConfig()) -> FuseResult:
    """Merge a matched local graph into the global graph in place."""
    result = FuseResult()
    with global_graph.lock:
        for lid, gid, _ in match.assignments:
            if lid not in local_graph.nodes or gid not in global_graph.nodes:
                raise GraphError(f"stale match: ({lid}, {gid}) not present in graphs")
        for lid in match.new_instances:
            if lid not in local_graph.nodes:
                raise GraphError(f"stale match: local node {lid} missing")

        for lid, gid, _ in match.assignments:
            loc, glob = local_graph.nodes[lid], global_graph.nodes[gid]
            glob.geometry = Geometry(glob.box.union(loc.box), glob.grid.union(loc.grid))
            glob.observation_count += 1
            glob.descriptor = _blend(glob.descriptor, loc.descriptor,
                                     glob.observation_count, config.descriptor_blend)
            result.local_to_global[lid] = gid
            result.same_instance.append((lid, gid))
            result.updated.append(gid)

        for lid in match.new_instances:
            loc = local_graph.nodes[lid]
            gid = global_graph.add_node(
                "global_object",
                geometry=loc.geometry,
                descriptor=np.array(loc.descriptor, copy=True),
                class_label=loc.class_label,
                class_scores=None if loc.class_scores is None else np.array(loc.class_scores),
                observation_count=1,
                score_count=1 if loc.class_scores is not None else 0,
            )
            result.local_to_global[lid] = gid
            result.created.append(gid)

        refresh_geometric_edges(global_graph, result.updated + result.created, construct)
    return result


def refresh_geometric_edges(graph: SceneGraph, affected: Iterable[int],
                            construct: ConstructConfig = ConstructConfig()) -> None:
    """Recompute object-object edges touching ``affected``, then ground edges and layers."""
    affected = sorted(set(affected))
    if not affected:
        return
    ground = ground_node(graph)
    aff = set(affected)
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        if e.edge_type in GEOMETRIC_EDGE_TYPES and (e.src in aff or e.dst in aff):
            graph.remove_edge(eid)
    for eid in [e.id for e in graph.out_edges(ground, "supports")]:
        graph.remove_edge(eid)

    objects = [n.id for n in graph.nodes_of_type("global_object")]
    tol = int(construct.contact_tolerance)
    thr = construct.edge_distance_threshold
    for a in affected:
        na = graph.nodes[a]
        ca = na.box.center
        for b in objects:
            if b == a or (b in aff and b < a):
                continue
            nb = graph.nodes[b]
            prox = float(np.linalg.norm(ca - nb.box.center)) <= thr
            if not prox and not grid_distance_ok(na.grid, nb.grid, tol):
                continue
            lo, hi = (a, b) if a < b else (b, a)
            wire_object_edges(graph, lo, hi, construct, prox)
    connect_ground(graph, ground, objects, construct)
    assign_layers(graph)


def enrich_global_features(global_graph: SceneGraph,
                           class_scores: Optional[Mapping[int, np.ndarray]] = None,
                           embeddings: Optional[Mapping[int, np.ndarray]] = None,
                           class_names: Optional[List[str]] = None) -> List[int]:
    """Fold prior features into global nodes.

    Class scores accumulate as a running mean and set ``class_label`` to the
    argmax (by name when ``class_names`` is given, else the index as a
    string). Embeddings replace whatever was stored. Returns updated ids.
    """
    updated = set()
    with global_graph.lock:
        for gid, scores in sorted((class_scores or {}).items()):
            node = global_graph.nodes.get(gid)
            if node is None or node.node_type != "global_object":
                raise GraphError(f"{gid} is not a global_object node")
            s = np.asarray(scores, dtype=np.float64)
            if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s < 0) \
                    or abs(float(s.sum()) - 1.0) > 1e-6:
                raise ValueError(f"scores for node {gid} are not a normalized distribution")
            if node.class_scores is not None and len(node.class_scores) != len(s):
                raise ValueError(
                    f"score dimension {len(s)} != stored {len(node.class_scores)} for node {gid}")
            if node.class_scores is None or node.score_count == 0:
                node.class_scores = s.copy()
                node.score_count = 1
            else:
                node.score_count += 1
                node.class_scores = node.class_scores + (s - node.class_scores) / node.score_count
            k = int(np.argmax(node.class_scores))
            node.class_label = class_names[k] if class_names is not None else str(k)
            updated.add(gid)

        dims = {len(np.asarray(v)) for v in (embeddings or {}).values()}
        stored = {len(n.embedding) for n in global_graph.nodes_of_type("global_object")
                  if n.embedding is not None}
        if len(dims | stored) > 1:
            raise ValueError(f"inconsistent embedding dimensions {sorted(dims | stored)}")
        for gid, vec in sorted((embeddings or {}).items()):
            node = global_graph.nodes.get(gid)
            if node is None or node.node_type != "global_object":
                raise GraphError(f"{gid} is not a global_object node")
            node.embedding = np.array(vec, dtype=np.float64)
            updated.add(gid)
    return sorted(updated)

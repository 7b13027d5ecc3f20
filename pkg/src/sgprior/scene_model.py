"""Core geometry and the heterogeneous scene graph.

Geometry lives in world-anchored voxel space: a point ``p`` falls into cell
``floor(p / resolution)`` regardless of which object it belongs to, so
contact and overlap tests between objects never need resampling.
"""
from __future__ import annotations

import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 0.05

Cell = Tuple[int, int, int]

NODE_TYPES = ("local_object", "global_object", "concept", "virtual_ground")
EDGE_TYPES = ("proximal", "contact", "supports", "same_instance", "grounded_in", "related")
OBJECT_TYPES = ("local_object", "global_object")


class GraphError(ValueError):
    """Raised when a graph mutation would violate a structural invariant."""


class GeometryError(ValueError):
    pass


def as_points(points) -> np.ndarray:
    """Coerce to a finite ``(N, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("points contain NaN or Inf")
    return arr


@dataclass(frozen=True)
class AABB:
    min: Tuple[float, float, float]
    max: Tuple[float, float, float]

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise GeometryError(f"AABB min {self.min} exceeds max {self.max}")

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min) + np.asarray(self.max)) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max) - np.asarray(self.min)

    def union(self, other: "AABB") -> "AABB":
        return AABB(
            tuple(min(a, b) for a, b in zip(self.min, other.min)),
            tuple(max(a, b) for a, b in zip(self.max, other.max)),
        )


def bounds(points) -> AABB:
    pts = as_points(points)
    if len(pts) == 0:
        raise GeometryError("bounds of an empty point set")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return AABB(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


class SparseVoxelGrid:
    """Immutable set of occupied integer cells at a fixed resolution."""

    __slots__ = ("resolution", "cells", "_array", "_bounds", "_footprint")

    def __init__(self, resolution: float, cells: Iterable[Cell] = ()):
        if not resolution > 0:
            raise GeometryError(f"resolution must be positive, got {resolution}")
        self.resolution = float(resolution)
        self.cells: frozenset = frozenset((int(i), int(j), int(k)) for i, j, k in cells)
        self._array: Optional[np.ndarray] = None
        self._bounds = None
        self._footprint = None

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[Cell]:
        return iter(self.cells)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVoxelGrid):
            return NotImplemented
        return self.resolution == other.resolution and self.cells == other.cells

    def __hash__(self) -> int:
        return hash((self.resolution, self.cells))

    def __repr__(self) -> str:
        return f"SparseVoxelGrid(resolution={self.resolution}, cells={len(self.cells)})"

    @property
    def array(self) -> np.ndarray:
        """Cells as a sorted ``(M, 3)`` int64 array."""
        if self._array is None:
            if self.cells:
                arr = np.array(sorted(self.cells), dtype=np.int64)
            else:
                arr = np.zeros((0, 3), dtype=np.int64)
            arr.setflags(write=False)
            self._array = arr
        return self._array

    def centers(self) -> np.ndarray:
        return (self.array.astype(np.float64) + 0.5) * self.resolution

    def cell_bounds(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if not self.cells:
            return None
        if self._bounds is None:
            arr = self.array
            self._bounds = (arr.min(axis=0), arr.max(axis=0))
        return self._bounds

    def footprint(self) -> frozenset:
        """Horizontal projection: the set of occupied ``(i, j)`` columns."""
        if self._footprint is None:
            self._footprint = frozenset((i, j) for i, j, _ in self.cells)
        return self._footprint

    def union(self, other: "SparseVoxelGrid") -> "SparseVoxelGrid":
        check_resolution(self, other)
        return SparseVoxelGrid(self.resolution, self.cells | other.cells)


def check_resolution(a: SparseVoxelGrid, b: SparseVoxelGrid) -> None:
    if a.resolution != b.resolution:
        raise GeometryError(f"resolution mismatch: {a.resolution} vs {b.resolution}")


# cells packed into one int64 key: 21 bits per axis
_PACK_HALF = 1 << 20
_PACK_MASK = (1 << 21) - 1


def voxelize(points, resolution: float = DEFAULT_RESOLUTION) -> SparseVoxelGrid:
    if not resolution > 0:
        raise GeometryError(f"resolution must be positive, got {resolution}")
    pts = as_points(points)
    if len(pts) == 0:
        return SparseVoxelGrid(resolution)
    idx = np.floor(pts / resolution).astype(np.int64)
    if np.abs(idx).max() < _PACK_HALF:
        keys = np.unique(((idx[:, 0] + _PACK_HALF) << 42) | ((idx[:, 1] + _PACK_HALF) << 21)
                         | (idx[:, 2] + _PACK_HALF))
        idx = np.stack([(keys >> 42) - _PACK_HALF,
                        ((keys >> 21) & _PACK_MASK) - _PACK_HALF,
                        (keys & _PACK_MASK) - _PACK_HALF], axis=1)
    else:
        idx = np.unique(idx, axis=0)
    grid = SparseVoxelGrid(resolution, map(tuple, idx.tolist()))
    idx.setflags(write=False)
    grid._array = idx
    return grid


def voxel_iou(a: SparseVoxelGrid, b: SparseVoxelGrid) -> float:
    check_resolution(a, b)
    if not a.cells and not b.cells:
        return 0.0
    inter = len(a.cells & b.cells)
    if inter == 0:
        return 0.0
    return inter / (len(a.cells) + len(b.cells) - inter)


@dataclass(frozen=True)
class Geometry:
    box: AABB
    grid: SparseVoxelGrid


@dataclass
class SceneNode:
    id: int
    node_type: str
    layer: int = 0
    geometry: Optional[Geometry] = None
    descriptor: Optional[np.ndarray] = None
    class_label: Optional[str] = None
    class_scores: Optional[np.ndarray] = None
    observation_count: int = 0
    # bookkeeping beyond the core fields
    segment_id: Optional[int] = None
    embedding: Optional[np.ndarray] = None
    score_count: int = 0

    @property
    def grid(self) -> SparseVoxelGrid:
        return self.geometry.grid

    @property
    def box(self) -> AABB:
        return self.geometry.box


@dataclass
class SceneEdge:
    id: int
    src: int
    dst: int
    edge_type: str
    relation_label: Optional[str] = None
    features: Optional[np.ndarray] = None
    kg_relation: Optional[str] = None


def _validate_node(node: SceneNode) -> None:
    if node.node_type not in NODE_TYPES:
        raise GraphError(f"unknown node type {node.node_type!r}")
    if node.node_type in OBJECT_TYPES and node.geometry is None:
        raise GraphError(f"{node.node_type} node requires geometry")
    if node.node_type not in OBJECT_TYPES and node.geometry is not None:
        raise GraphError(f"{node.node_type} node must not carry geometry")
    if node.layer < 0:
        raise GraphError("layer must be >= 0")
    if node.observation_count < 0:
        raise GraphError("observation_count must be >= 0")
    if node.descriptor is not None and not np.all(np.isfinite(node.descriptor)):
        raise GraphError("descriptor must be finite")
    if node.class_scores is not None:
        s = np.asarray(node.class_scores, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s < 0):
            raise GraphError("class_scores must be a finite non-negative vector")
        if abs(float(s.sum()) - 1.0) > 1e-6:
            raise GraphError(f"class_scores sum to {s.sum()}, expected 1")


class SceneGraph:
    """Typed-node, typed-edge graph with an adjacency index per edge type.

    Ids are assigned by the graph and never reused. Mutations take
    ``self.lock``; readers that need a consistent snapshot across several
    calls should hold it too.
    """

    def __init__(self):
        self.nodes: Dict[int, SceneNode] = {}
        self.edges: Dict[int, SceneEdge] = {}
        self._out: Dict[Tuple[int, str], Set[int]] = defaultdict(set)
        self._in: Dict[Tuple[int, str], Set[int]] = defaultdict(set)
        self.next_node_id = 0
        self.next_edge_id = 0
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.nodes)

    # -- nodes ------------------------------------------------------------
    def add_node(self, node_type: str, **fields) -> int:
        with self.lock:
            node = SceneNode(id=self.next_node_id, node_type=node_type, **fields)
            if node.class_scores is not None:
                node.class_scores = np.asarray(node.class_scores, dtype=np.float64)
            if node.descriptor is not None:
                node.descriptor = np.asarray(node.descriptor, dtype=np.float64)
            _validate_node(node)
            self.nodes[node.id] = node
            self.next_node_id += 1
            return node.id

    def remove_node(self, node_id: int) -> None:
        with self.lock:
            self._require_node(node_id)
            incident = {e for (n, _), ids in self._out.items() if n == node_id for e in ids}
            incident |= {e for (n, _), ids in self._in.items() if n == node_id for e in ids}
            for eid in sorted(incident):
                self.remove_edge(eid)
            del self.nodes[node_id]

    def _require_node(self, node_id: int) -> SceneNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GraphError(f"no node with id {node_id}") from None

    def nodes_of_type(self, node_type: str) -> List[SceneNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.node_type == node_type]

    # -- edges ------------------------------------------------------------
    def add_edge(self, src: int, dst: int, edge_type: str, **fields) -> int:
        with self.lock:
            if edge_type not in EDGE_TYPES:
                raise GraphError(f"unknown edge type {edge_type!r}")
            a = self._require_node(src)
            b = self._require_node(dst)
            if src == dst:
                raise GraphError("self-loops are not allowed")
            self._check_edge_types(a, b, edge_type, fields)
            if edge_type == "supports" and self._reaches(dst, src, "supports"):
                raise GraphError(f"supports edge {src}->{dst} would create a cycle")
            edge = SceneEdge(id=self.next_edge_id, src=src, dst=dst, edge_type=edge_type, **fields)
            if edge.features is not None:
                edge.features = np.asarray(edge.features, dtype=np.float64)
            self.edges[edge.id] = edge
            self._out[(src, edge_type)].add(edge.id)
            self._in[(dst, edge_type)].add(edge.id)
            self.next_edge_id += 1
            return edge.id

    @staticmethod
    def _check_edge_types(a: SceneNode, b: SceneNode, edge_type: str, fields: dict) -> None:
        ta, tb = a.node_type, b.node_type
        if fields.get("kg_relation") is not None and edge_type != "related":
            raise GraphError("kg_relation is only valid on related edges")
        if edge_type == "same_instance":
            ok = ta == "local_object" and tb == "global_object"
        elif edge_type == "grounded_in":
            ok = ta == "global_object" and tb == "concept"
        elif edge_type == "related":
            ok = ta == "concept" and tb == "concept"
        elif edge_type == "supports":
            ok = (ta in OBJECT_TYPES or ta == "virtual_ground") and tb in OBJECT_TYPES
            if ok and ta in OBJECT_TYPES:
                ok = ta == tb
        else:  # proximal, contact
            ok = ta in OBJECT_TYPES and ta == tb
        if not ok:
            raise GraphError(f"{edge_type} edge not allowed between {ta} and {tb}")

    def _reaches(self, start: int, goal: int, edge_type: str) -> bool:
        stack, seen = [start], {start}
        while stack:
            n = stack.pop()
            if n == goal:
                return True
            for eid in self._out.get((n, edge_type), ()):
                m = self.edges[eid].dst
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return False

    def remove_edge(self, edge_id: int) -> None:
        with self.lock:
            edge = self.edges.pop(edge_id, None)
            if edge is None:
                raise GraphError(f"no edge with id {edge_id}")
            self._out[(edge.src, edge.edge_type)].discard(edge_id)
            self._in[(edge.dst, edge.edge_type)].discard(edge_id)

    def out_edges(self, node_id: int, edge_type: str) -> List[SceneEdge]:
        return [self.edges[e] for e in sorted(self._out.get((node_id, edge_type), ()))]

    def in_edges(self, node_id: int, edge_type: str) -> List[SceneEdge]:
        return [self.edges[e] for e in sorted(self._in.get((node_id, edge_type), ()))]

    def edges_of_type(self, edge_type: str) -> List[SceneEdge]:
        return [e for _, e in sorted(self.edges.items()) if e.edge_type == edge_type]

    def find_edge(self, src: int, dst: int, edge_type: str) -> Optional[SceneEdge]:
        for eid in self._out.get((src, edge_type), ()):
            if self.edges[eid].dst == dst:
                return self.edges[eid]
        return None

    # -- checks -----------------------------------------------------------
    def supports_topological_order(self) -> Optional[List[int]]:
        """Kahn order over supports edges, or None if they contain a cycle."""
        indeg = {n: 0 for n in self.nodes}
        for e in self.edges.values():
            if e.edge_type == "supports":
                indeg[e.dst] += 1
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for e in self.out_edges(n, "supports"):
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
        return order if len(order) == len(self.nodes) else None

    def check_invariants(self) -> None:
        """Raise GraphError if any structural invariant is broken."""
        for node in self.nodes.values():
            _validate_node(node)
        seen_out: Dict[Tuple[int, str], Set[int]] = defaultdict(set)
        seen_in: Dict[Tuple[int, str], Set[int]] = defaultdict(set)
        for e in self.edges.values():
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise GraphError(f"edge {e.id} has a dangling endpoint")
            self._check_edge_types(self.nodes[e.src], self.nodes[e.dst], e.edge_type,
                                   {"kg_relation": e.kg_relation})
            seen_out[(e.src, e.edge_type)].add(e.id)
            seen_in[(e.dst, e.edge_type)].add(e.id)
        if {k: v for k, v in self._out.items() if v} != seen_out:
            raise GraphError("outgoing adjacency index out of sync")
        if {k: v for k, v in self._in.items() if v} != seen_in:
            raise GraphError("incoming adjacency index out of sync")
        if self.supports_topological_order() is None:
            raise GraphError("supports subgraph contains a cycle")
        if self.nodes and max(self.nodes) >= self.next_node_id:
            raise GraphError("node id counter behind existing ids")
        if self.edges and max(self.edges) >= self.next_edge_id:
            raise GraphError("edge id counter behind existing ids")

    def copy(self) -> "SceneGraph":
        g = SceneGraph()
        g.nodes = {k: replace(v) for k, v in self.nodes.items()}
        g.edges = {k: replace(v) for k, v in self.edges.items()}
        for (k, t), v in self._out.items():
            if v:
                g._out[(k, t)] = set(v)
        for (k, t), v in self._in.items():
            if v:
                g._in[(k, t)] = set(v)
        g.next_node_id = self.next_node_id
        g.next_edge_id = self.next_edge_id
        return g


def supports_levels(graph: SceneGraph) -> Dict[int, int]:
    """Longest supports-path depth per node; nodes with no supporter get 0."""
    order = graph.supports_topological_order()
    if order is None:
        raise GraphError("supports subgraph contains a cycle")
    level = {n: 0 for n in graph.nodes}
    for n in order:
        for e in graph.out_edges(n, "supports"):
            level[e.dst] = max(level[e.dst], level[n] + 1)
    return level


def assign_layers(graph: SceneGraph) -> None:
    for nid, lvl in supports_levels(graph).items():
        graph.nodes[nid].layer = lvl


def grid_distance_ok(a: SparseVoxelGrid, b: SparseVoxelGrid, tolerance: int) -> bool:
    """Cheap reject: can any cell pair be within Chebyshev ``tolerance``?"""
    ba, bb = a.cell_bounds(), b.cell_bounds()
    if ba is None or bb is None:
        return False
    return bool(np.all(ba[0] - tolerance <= bb[1]) and np.all(bb[0] - tolerance <= ba[1]))


def chebyshev_contact(a: SparseVoxelGrid, b: SparseVoxelGrid, tolerance: int) -> bool:
    check_resolution(a, b)
    if not grid_distance_ok(a, b, tolerance):
        return False
    small, large = (a, b) if len(a) <= len(b) else (b, a)
    if tolerance == 0:
        return not small.cells.isdisjoint(large.cells)
    # restrict the dilation to cells of `small` near `large`'s bounding box
    lo, hi = large.cell_bounds()
    arr = small.array
    near = np.all((arr >= lo - tolerance) & (arr <= hi + tolerance), axis=1)
    rng = range(-tolerance, tolerance + 1)
    offsets = [(dx, dy, dz) for dx in rng for dy in rng for dz in rng]
    cells = large.cells
    for i, j, k in arr[near].tolist():
        for dx, dy, dz in offsets:
            if (i + dx, j + dy, k + dz) in cells:
                return True
    return False


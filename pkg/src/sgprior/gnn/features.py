"""Assemble local, global and knowledge layers into one typed feature graph."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..frame_ingest import D_GEO
from ..knowledge_graph import KnowledgeGraph
from ..scene_model import SceneGraph, SceneNode

NODE_KINDS = ("local", "global", "concept")

# message types; the name says which way information flows
MESSAGE_TYPES = (
    "proximal",
    "contact",
    "supports_down",        # supporter -> supported
    "supports_up",          # supported -> supporter
    "instance_to_local",    # global -> local along same_instance
    "instance_to_global",   # local -> global along same_instance
    "concept_to_global",    # concept -> global along grounded_in
    "global_to_concept",
    "related",
)
CONDUIT_TYPES = ("instance_to_local", "instance_to_global", "concept_to_global",
                 "global_to_concept")

EDGE_FEATURE_DIM = 6
EDGE_FEATURE_NAMES = ("dx", "dy", "dz", "center_distance", "vertical_gap", "footprint_overlap")


@dataclass(frozen=True)
class FeatureConfig:
    num_classes: int
    local_embedding_dim: int = 0
    global_embedding_dim: int = 0
    concept_dim: int = 0

    def input_dims(self) -> Dict[str, int]:
        return {
            "local": D_GEO + self.local_embedding_dim,
            "global": D_GEO + self.num_classes + self.global_embedding_dim,
            "concept": max(self.concept_dim, 1),
        }


@dataclass
class JointGraph:
    """Row-indexed typed graph; rows are grouped local, then global, then concept."""

    features: Dict[str, np.ndarray]
    node_keys: List[Tuple[str, object]]
    messages: Dict[str, Tuple[np.ndarray, np.ndarray]]
    edge_pairs: np.ndarray            # (m, 2) row indices of local candidate edges
    edge_features: np.ndarray         # (m, EDGE_FEATURE_DIM)
    related_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    related_names: Tuple[str, ...] = ()

    @property
    def num_nodes(self) -> int:
        return len(self.node_keys)

    def count(self, kind: str) -> int:
        return len(self.features[kind])

    def kind_slice(self, kind: str) -> slice:
        start = 0
        for k in NODE_KINDS:
            n = self.count(k)
            if k == kind:
                return slice(start, start + n)
            start += n
        raise KeyError(kind)

    def scored_rows(self) -> slice:
        return slice(0, self.count("local") + self.count("global"))

    def without_conduits(self) -> "JointGraph":
        msgs = {t: (s, d) for t, (s, d) in self.messages.items()}
        empty = np.zeros(0, dtype=np.int64)
        for t in CONDUIT_TYPES:
            msgs[t] = (empty, empty)
        return JointGraph(self.features, self.node_keys, msgs, self.edge_pairs,
                          self.edge_features, self.related_features, self.related_names)

    def local_edge_keys(self) -> List[Tuple[int, int]]:
        return [(self.node_keys[a][1], self.node_keys[b][1]) for a, b in self.edge_pairs.tolist()]


def edge_feature(a: SceneNode, b: SceneNode) -> np.ndarray:
    """Relative spatial configuration of ``b`` seen from ``a``."""
    ca, cb = a.box.center, b.box.center
    d = cb - ca
    gap = b.box.min[2] - a.box.max[2]
    fa, fb = a.grid.footprint(), b.grid.footprint()
    small = min(len(fa), len(fb))
    overlap = len(fa & fb) / small if small else 0.0
    return np.array([d[0], d[1], d[2], float(np.linalg.norm(d)), gap, overlap])


def local_candidate_edges(local: SceneGraph) -> List[Tuple[int, int]]:
    """Object pairs joined by a proximal or contact edge, as ascending id pairs."""
    pairs = set()
    for e in local.edges.values():
        if e.edge_type in ("proximal", "contact"):
            if local.nodes[e.src].node_type == "local_object" and \
               local.nodes[e.dst].node_type == "local_object":
                pairs.add((min(e.src, e.dst), max(e.src, e.dst)))
    return sorted(pairs)


def _stack(rows: List[np.ndarray], dim: int) -> np.ndarray:
    if not rows:
        return np.zeros((0, dim))
    return np.vstack(rows).astype(np.float64)


def _embedding_block(vec, dim: int, what: str) -> np.ndarray:
    if dim == 0:
        return np.zeros(0)
    if vec is None:
        return np.zeros(dim)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (dim,):
        raise ValueError(f"{what} embedding has shape {vec.shape}, expected ({dim},)")
    return vec


def assemble_joint_graph(
    local: SceneGraph,
    global_graph: Optional[SceneGraph],
    kg: Optional[KnowledgeGraph],
    fcfg: FeatureConfig,
    same_instance: Sequence[Tuple[int, int]] = (),
    local_embeddings: Optional[Mapping[int, np.ndarray]] = None,
) -> JointGraph:
    """Typed feature graph over the three layers.

    ``same_instance`` lists ``(local id, global id)`` conduits. Grounding
    conduits come from the global graph's ``grounded_in`` edges, resolved
    against ``kg`` by concept id. Node rows are ordered by kind, then id.
    """
    keys: List[Tuple[str, object]] = []
    row: Dict[Tuple[str, object], int] = {}

    def add(kind, key):
        row[(kind, key)] = len(keys)
        keys.append((kind, key))

    locals_ = local.nodes_of_type("local_object")
    globals_ = global_graph.nodes_of_type("global_object") if global_graph is not None else []
    concepts = sorted(kg.concepts) if kg is not None else []
    for n in locals_:
        add("local", n.id)
    for n in globals_:
        add("global", n.id)
    for c in concepts:
        add("concept", c)

    k = fcfg.num_classes
    loc_rows = []
    for n in locals_:
        emb = None
        if local_embeddings is not None and n.segment_id is not None:
            emb = local_embeddings.get(n.segment_id)
        if emb is None:
            emb = n.embedding
        loc_rows.append(np.concatenate(
            [n.descriptor, _embedding_block(emb, fcfg.local_embedding_dim, "local")]))
    glob_rows = []
    for n in globals_:
        scores = np.zeros(k) if n.class_scores is None else np.asarray(n.class_scores)
        if scores.shape != (k,):
            raise ValueError(f"global node {n.id} has {scores.shape} scores, expected ({k},)")
        glob_rows.append(np.concatenate(
            [n.descriptor, scores,
             _embedding_block(n.embedding, fcfg.global_embedding_dim, "global")]))
    con_rows = []
    for c in concepts:
        if fcfg.concept_dim == 0:
            con_rows.append(np.ones(1))
        else:
            vec = kg.embeddings.get(c) if kg.embeddings else None
            con_rows.append(_embedding_block(vec, fcfg.concept_dim, "concept"))
    dims = fcfg.input_dims()
    features = {
        "local": _stack(loc_rows, dims["local"]),
        "global": _stack(glob_rows, dims["global"]),
        "concept": _stack(con_rows, dims["concept"]),
    }

    msg: Dict[str, List[Tuple[int, int]]] = {t: [] for t in MESSAGE_TYPES}
    for kind, graph, nodes in (("local", local, locals_), ("global", global_graph, globals_)):
        if graph is None:
            continue
        ids = {n.id for n in nodes}
        for eid in sorted(graph.edges):
            e = graph.edges[eid]
            if e.src not in ids or e.dst not in ids:
                continue
            a, b = row[(kind, e.src)], row[(kind, e.dst)]
            if e.edge_type in ("proximal", "contact"):
                msg[e.edge_type] += [(a, b), (b, a)]
            elif e.edge_type == "supports":
                msg["supports_down"].append((a, b))
                msg["supports_up"].append((b, a))
    for lid, gid in sorted(same_instance):
        if ("local", lid) not in row or ("global", gid) not in row:
            raise ValueError(f"conduit ({lid}, {gid}) refers to a node outside the joint graph")
        a, b = row[("local", lid)], row[("global", gid)]
        msg["instance_to_local"].append((b, a))
        msg["instance_to_global"].append((a, b))
    if global_graph is not None and kg is not None:
        for e in global_graph.edges_of_type("grounded_in"):
            cid = global_graph.nodes[e.dst].class_label
            if ("global", e.src) in row and ("concept", cid) in row:
                g, c = row[("global", e.src)], row[("concept", cid)]
                msg["concept_to_global"].append((c, g))
                msg["global_to_concept"].append((g, c))
    rel_names: Tuple[str, ...] = ()
    rel_feats = np.zeros((0, 0))
    if kg is not None:
        rel_names = tuple(kg.relation_names())
        onehots = []
        for src, rel, dst, _ in sorted(kg.relations):
            if src == dst:
                continue
            a, b = row[("concept", src)], row[("concept", dst)]
            msg["related"] += [(a, b), (b, a)]
            oh = np.zeros(len(rel_names))
            oh[rel_names.index(rel)] = 1.0
            onehots.append(oh)
        rel_feats = _stack(onehots, len(rel_names))

    messages = {}
    for t, pairs in msg.items():
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        messages[t] = (arr[:, 0].copy(), arr[:, 1].copy())

    cand = local_candidate_edges(local)
    pairs = np.array([(row[("local", a)], row[("local", b)]) for a, b in cand],
                     dtype=np.int64).reshape(-1, 2)
    efeat = _stack([edge_feature(local.nodes[a], local.nodes[b]) for a, b in cand],
                   EDGE_FEATURE_DIM)
    return JointGraph(features, keys, messages, pairs, efeat, rel_feats, rel_names)


def permute_within_kinds(jg: JointGraph, rng: np.random.Generator) -> Tuple[JointGraph, np.ndarray]:
    """Relabel rows by a random permutation inside each kind block.

    Returns the new graph and ``perm`` with ``new_row = perm[old_row]``.
    """
    perm = np.empty(jg.num_nodes, dtype=np.int64)
    feats = {}
    keys: List = [None] * jg.num_nodes
    for kind in NODE_KINDS:
        sl = jg.kind_slice(kind)
        n = sl.stop - sl.start
        p = rng.permutation(n)
        perm[sl.start + np.arange(n)] = sl.start + p
        f = np.empty_like(jg.features[kind])
        f[p] = jg.features[kind]
        feats[kind] = f
    for old, key in enumerate(jg.node_keys):
        keys[perm[old]] = key
    msgs = {t: (perm[s], perm[d]) for t, (s, d) in jg.messages.items()}
    pairs = perm[jg.edge_pairs] if len(jg.edge_pairs) else jg.edge_pairs
    return JointGraph(feats, keys, msgs, pairs, jg.edge_features, jg.related_features,
                      jg.related_names), perm

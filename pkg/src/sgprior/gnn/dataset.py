"""Turn synthetic or recorded frames into supervised batches."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..frame_ingest import Frame, split_segments
from ..global_fusion import FusionConfig, fuse_frame, match_instances, new_global_graph
from ..graph_construct import ConstructConfig, build_local_graph
from ..knowledge_graph import KnowledgeGraph, link_global_to_concepts
from ..scene_model import DEFAULT_RESOLUTION, SceneGraph
from .features import FeatureConfig, JointGraph, assemble_joint_graph
from .model import EDGE_CLASSES

logger = logging.getLogger(__name__)


@dataclass
class TrainBatch:
    graph: JointGraph
    node_labels: np.ndarray   # one per local row, -1 = unlabeled
    edge_labels: np.ndarray   # one per local candidate edge
    name: str = ""

    def __post_init__(self):
        self.node_labels = np.asarray(self.node_labels, dtype=np.int64)
        self.edge_labels = np.asarray(self.edge_labels, dtype=np.int64)
        if len(self.node_labels) != self.graph.count("local"):
            raise ValueError(f"{len(self.node_labels)} node labels for "
                             f"{self.graph.count('local')} local nodes")
        if len(self.edge_labels) != len(self.graph.edge_pairs):
            raise ValueError(f"{len(self.edge_labels)} edge labels for "
                             f"{len(self.graph.edge_pairs)} candidate edges")


def relation_lookup(frame: Frame) -> Dict[Tuple[int, int], str]:
    """Ordered segment pair -> edge class name, from the frame's GT relations.

    A ``supports`` relation ``a -> b`` labels ``(a, b)`` as ``supports`` and
    ``(b, a)`` as ``standing_on``. When several relations cover a pair the
    more specific one wins: supports, then contact, then next_to.
    """
    rank = {"supports": 0, "standing_on": 0, "contact": 1, "next_to": 2}
    out: Dict[Tuple[int, int], str] = {}

    def put(key, name):
        if key not in out or rank[name] < rank[out[key]]:
            out[key] = name

    for src, dst, rel in frame.gt_relations:
        if rel == "supports":
            put((src, dst), "supports")
            put((dst, src), "standing_on")
        elif rel in ("contact", "next_to"):
            put((src, dst), rel)
            put((dst, src), rel)
        else:
            logger.debug("ignoring relation %r between %d and %d", rel, src, dst)
    return out


def frame_labels(local: SceneGraph, jg: JointGraph, frame: Frame,
                 class_names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """GT labels for the local rows and candidate edges of ``jg``."""
    index = {c: i for i, c in enumerate(class_names)}
    rows = jg.kind_slice("local")
    node_labels = np.full(rows.stop - rows.start, -1, dtype=np.int64)
    for r in range(rows.start, rows.stop):
        seg = local.nodes[jg.node_keys[r][1]].segment_id
        cls = frame.gt_class.get(seg)
        if cls is not None:
            if cls not in index:
                raise ValueError(f"class {cls!r} of segment {seg} is not in the class list")
            node_labels[r - rows.start] = index[cls]
    rel = relation_lookup(frame)
    edge_labels = np.zeros(len(jg.edge_pairs), dtype=np.int64)
    for i, (a, b) in enumerate(jg.local_edge_keys()):
        key = (local.nodes[a].segment_id, local.nodes[b].segment_id)
        edge_labels[i] = EDGE_CLASSES.index(rel.get(key, "none"))
    return node_labels, edge_labels


def onehot(label: Optional[str], class_names: Sequence[str]) -> np.ndarray:
    v = np.zeros(len(class_names))
    if label is not None:
        v[list(class_names).index(label)] = 1.0
    return v


def label_embeddings(frame: Frame, class_names: Sequence[str]) -> Dict[int, np.ndarray]:
    """Per-segment one-hot of the frame's labels, a stand-in for a noisy detector."""
    return {seg: onehot(cls, class_names) for seg, cls in frame.gt_class.items()}


def sequence_batches(
    frames: Sequence[Frame],
    class_names: Sequence[str],
    fcfg: FeatureConfig,
    *,
    context: bool = True,
    input_frames: Optional[Sequence[Frame]] = None,
    local_embeddings: Optional[Sequence[Mapping[int, np.ndarray]]] = None,
    kg: Optional[KnowledgeGraph] = None,
    resolution: float = DEFAULT_RESOLUTION,
    construct: ConstructConfig = ConstructConfig(),
    fusion: FusionConfig = FusionConfig(),
    kg_language: str = "en",
    name: str = "",
) -> List[TrainBatch]:
    """One batch per frame of a walkthrough.

    Frames are fused in order. Each frame is assembled against the global
    graph as it stood before that frame, so the first frame never has
    context. Global nodes carry the one-hot GT class of the segment that
    created them. ``input_frames`` (same geometry, possibly corrupted
    labels) feed local label embeddings when ``fcfg.local_embedding_dim``
    is nonzero, unless explicit per-frame ``local_embeddings`` are given.
    Supervision always comes from ``frames``. With a ``kg``, labeled global
    nodes are grounded in their concepts.
    """
    for extra in (input_frames, local_embeddings):
        if extra is not None and len(extra) != len(frames):
            raise ValueError("input_frames and local_embeddings must align with frames")
    glob = new_global_graph()
    batches = []
    for i, frame in enumerate(frames):
        obs, _ = split_segments(frame, resolution)
        local = build_local_graph(obs, construct)
        match = match_instances(local, glob, fusion)
        conduits = [(l, g) for l, g, _ in match.assignments] if context else []
        emb = None
        if local_embeddings is not None:
            emb = local_embeddings[i]
        elif fcfg.local_embedding_dim:
            emb = label_embeddings(input_frames[i] if input_frames is not None else frame,
                                   class_names)
        jg = assemble_joint_graph(local, glob if context else None, kg if context else None,
                                  fcfg, conduits, emb)
        nl, el = frame_labels(local, jg, frame, class_names)
        batches.append(TrainBatch(jg, nl, el, f"{name}#{frame.frame_id}"))
        res = fuse_frame(glob, local, match, fusion, construct)
        for lid, gid in sorted(res.local_to_global.items()):
            node = glob.nodes[gid]
            cls = frame.gt_class.get(local.nodes[lid].segment_id)
            if node.class_scores is None and cls is not None:
                node.class_scores = onehot(cls, class_names)
                node.class_label = cls
                node.score_count = 1
        if kg is not None and context:
            link_global_to_concepts(glob, kg, kg_language)
    return batches

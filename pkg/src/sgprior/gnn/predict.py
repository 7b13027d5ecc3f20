"""Inference on one frame's local graph against the current global context."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..knowledge_graph import KnowledgeGraph
from ..scene_model import SceneGraph
from .features import assemble_joint_graph
from .model import EDGE_CLASSES, ModelParams, forward


@dataclass
class FramePrediction:
    node_scores: Dict[int, np.ndarray] = field(default_factory=dict)
    node_labels: Dict[int, str] = field(default_factory=dict)
    edge_scores: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    edge_labels: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def enrichment(self, local_to_global: Mapping[int, int]) -> Dict[int, np.ndarray]:
        """Class scores keyed by global id, ready for ``enrich_global_features``."""
        return {local_to_global[lid]: s for lid, s in self.node_scores.items()
                if lid in local_to_global}


def predict_frame(params: ModelParams, local: SceneGraph, global_graph: Optional[SceneGraph],
                  kg: Optional[KnowledgeGraph], class_names: Sequence[str],
                  same_instance: Sequence[Tuple[int, int]] = (),
                  local_embeddings: Optional[Mapping[int, np.ndarray]] = None) -> FramePrediction:
    """Scores and argmax labels for every local object and candidate edge.

    Passing ``global_graph=None`` and ``kg=None`` gives the context-free
    prediction.
    """
    if len(class_names) != params.config.num_node_classes:
        raise ValueError(f"{len(class_names)} class names for "
                         f"{params.config.num_node_classes} model classes")
    jg = assemble_joint_graph(local, global_graph, kg, params.config.features,
                              same_instance, local_embeddings)
    pred = FramePrediction()
    if jg.count("local") == 0:
        return pred
    out = forward(params, jg)
    rows = jg.kind_slice("local")
    for r in range(rows.start, rows.stop):
        lid = jg.node_keys[r][1]
        s = out.node_probs[r]
        pred.node_scores[lid] = s
        pred.node_labels[lid] = class_names[int(np.argmax(s))]
    for i, key in enumerate(jg.local_edge_keys()):
        s = out.edge_probs[i]
        pred.edge_scores[key] = s
        pred.edge_labels[key] = EDGE_CLASSES[int(np.argmax(s))]
    return pred

"""Library-level orchestration behind the command-line tools."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import EngineConfig
from .frame_ingest import Frame, load_external_embeddings, load_frame, split_segments
from .global_fusion import (
    FuseResult,
    enrich_global_features,
    fuse_frame,
    match_instances,
    new_global_graph,
)
from .gnn.dataset import TrainBatch, frame_labels, sequence_batches
from .gnn.features import assemble_joint_graph
from .gnn.model import EDGE_CLASSES, ModelConfig, ModelParams
from .gnn.predict import FramePrediction, predict_frame
from .gnn.train import accuracy, macro_f1
from .graph_construct import build_local_graph
from .knowledge_graph import (
    KnowledgeGraph,
    ParseStats,
    extract_subgraph,
    link_global_to_concepts,
    load_numberbatch,
    parse_dump,
    spectral_embed,
)
from .scene_model import SceneGraph

logger = logging.getLogger(__name__)


class FrameError(Exception):
    """Wraps an error raised while processing one frame of a sequence."""

    def __init__(self, index: int, frame_id: int, cause: BaseException):
        self.index = index
        self.frame_id = frame_id
        self.cause = cause
        super().__init__(f"frame {index} (id {frame_id}): {cause}")


@dataclass
class FrameReport:
    frame_id: int
    segments: int
    dropped: int
    local_nodes: int
    local_edges: int
    matched: int
    new_instances: int
    global_nodes: int
    global_edges: int


@dataclass
class BuildResult:
    global_graph: SceneGraph
    local_graphs: List[SceneGraph] = field(default_factory=list)
    fusions: List[FuseResult] = field(default_factory=list)
    reports: List[FrameReport] = field(default_factory=list)

    def report_dict(self) -> dict:
        return {"frames": [asdict(r) for r in self.reports],
                "global_nodes": len(self.global_graph.nodes),
                "global_edges": len(self.global_graph.edges)}


def _process(frames: Sequence[Frame], cfg: EngineConfig, before=None, after=None) -> BuildResult:
    """Shared per-frame loop; ``before`` runs between matching and fusion, ``after`` last."""
    result = BuildResult(new_global_graph())
    g = result.global_graph
    for i, frame in enumerate(frames):
        try:
            obs, dropped = split_segments(frame, cfg.resolution, cfg.min_points)
            local = build_local_graph(obs, cfg.construct)
            match = match_instances(local, g, cfg.fusion)
            if before is not None:
                before(i, frame, local, match, g)
            fused = fuse_frame(g, local, match, cfg.fusion, cfg.construct)
            if after is not None:
                after(i, frame, local, fused, g)
        except Exception as exc:  # re-raised with the frame position attached
            raise FrameError(i, frame.frame_id, exc) from exc
        result.local_graphs.append(local)
        result.fusions.append(fused)
        result.reports.append(FrameReport(
            frame.frame_id, len(obs) + len(dropped), len(dropped),
            len(local.nodes_of_type("local_object")), len(local.edges),
            len(match.assignments), len(match.new_instances), len(g.nodes), len(g.edges)))
        logger.info("frame %d: %d matched, %d new", frame.frame_id, len(match.assignments),
                    len(match.new_instances))
    return result


def build_global(frames: Sequence[Frame], cfg: EngineConfig = EngineConfig()) -> BuildResult:
    """Ingest, construct, match and fuse each frame in order."""
    return _process(frames, cfg)


def extract_kg(cfg: EngineConfig) -> Tuple[KnowledgeGraph, dict]:
    if not cfg.paths.kg_dump:
        raise ValueError("paths.kg_dump is not set")
    stats = ParseStats()
    full = parse_dump(cfg.paths.kg_dump, cfg.kg.language, cfg.kg.relation_whitelist, stats)
    kg = extract_subgraph(full, cfg.kg.extraction())
    report = {
        "rows": stats.total_rows, "retained": stats.retained, "filtered": stats.filtered,
        "malformed": stats.malformed, "concepts": len(kg.concepts),
        "relations": len(kg.relations), "truncated": kg.truncated,
        "missing_seeds": list(kg.missing_seeds),
    }
    report.update(attach_embeddings(kg, cfg))
    return kg, report


def attach_embeddings(kg: KnowledgeGraph, cfg: EngineConfig) -> dict:
    source = cfg.kg.embedding
    if source == "none" or not kg.concepts:
        return {"embedding": "none"}
    if source == "numberbatch":
        if not cfg.paths.embeddings:
            raise ValueError("kg.embedding is 'numberbatch' but paths.embeddings is not set")
        cov = load_numberbatch(cfg.paths.embeddings, kg, cfg.kg.language)
        # concepts without a vector get zeros so every concept row has the same width
        dim = kg.embedding_dim or cfg.kg.embedding_dim
        for c in kg.concepts:
            kg.embeddings.setdefault(c, np.zeros(dim))
        return {"embedding": "numberbatch", "attached": cov.attached, "total": cov.total}
    dim = min(cfg.kg.embedding_dim, len(kg.concepts))
    spectral_embed(kg, dim, seed=cfg.kg.embedding_seed)
    return {"embedding": "spectral", "dim": dim}


def model_config(cfg: EngineConfig, kg: Optional[KnowledgeGraph] = None) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        num_node_classes=len(cfg.classes),
        hidden_dim=m.hidden_dim,
        num_layers=m.num_layers,
        lambda_edge=m.lambda_edge,
        class_weight_clip=m.class_weight_clip,
        local_embedding_dim=m.local_embedding_dim,
        concept_dim=(kg.embedding_dim or 0) if kg is not None else 0,
        seed=m.seed,
    )


@dataclass
class SceneFiles:
    name: str
    frames: List[Path]

    def embedding_paths(self) -> List[Optional[Path]]:
        out = []
        for f in self.frames:
            p = f.with_suffix(".emb")
            out.append(p if p.exists() else None)
        return out


def discover_scenes(root: Path) -> List[SceneFiles]:
    """Scene directories under ``root`` (or ``root`` itself) holding ``*.frame`` files."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = [root] + sorted(p for p in root.iterdir() if p.is_dir())
    scenes = []
    for d in dirs:
        frames = sorted(d.glob("*.frame"))
        if frames:
            scenes.append(SceneFiles(d.name, frames))
    return scenes


def load_embeddings_for(scene: SceneFiles, dim: int) -> Optional[List[Dict[int, np.ndarray]]]:
    if dim == 0:
        return None
    tables = []
    for f, p in zip(scene.frames, scene.embedding_paths()):
        if p is None:
            raise FileNotFoundError(f"model expects local embeddings but {f.stem}.emb is missing")
        table = load_external_embeddings(p, "segment")
        for seg, v in table.items():
            if len(v) != dim:
                raise ValueError(f"{p}: segment {seg} embedding has dimension {len(v)}, "
                                 f"model expects {dim}")
        tables.append(table)
    return tables


def dataset_batches(scenes: Sequence[SceneFiles], cfg: EngineConfig, mcfg: ModelConfig,
                    kg: Optional[KnowledgeGraph] = None) -> List[TrainBatch]:
    batches: List[TrainBatch] = []
    for scene in scenes:
        frames = [load_frame(p) for p in scene.frames]
        batches += sequence_batches(
            frames, cfg.classes, mcfg.features, context=cfg.model.context,
            local_embeddings=load_embeddings_for(scene, mcfg.local_embedding_dim),
            kg=kg, resolution=cfg.resolution, construct=cfg.construct, fusion=cfg.fusion,
            kg_language=cfg.kg.language, name=scene.name)
    return batches


@dataclass
class InferResult:
    build: BuildResult
    predictions: List[FramePrediction]
    report: dict


def infer(params: ModelParams, frames: Sequence[Frame], cfg: EngineConfig,
          kg: Optional[KnowledgeGraph] = None, context: bool = True,
          local_embeddings: Optional[Sequence[Dict[int, np.ndarray]]] = None) -> InferResult:
    """Predict every frame, feed scores back into the global graph and ground it.

    Local nodes get their predicted label and scores; local proximal and
    contact edges get the predicted relation of their pair. When frames
    carry ground truth the report includes accuracy and macro-F1.
    """
    classes = list(cfg.classes)
    predictions: List[FramePrediction] = []
    truth = {"node_true": [], "node_pred": [], "edge_true": [], "edge_pred": []}

    def before(i, frame, local, match, glob):
        emb = local_embeddings[i] if local_embeddings is not None else None
        if context:
            pred = predict_frame(params, local, glob, kg, classes,
                                 [(l, g) for l, g, _ in match.assignments], emb)
        else:
            pred = predict_frame(params, local, None, None, classes, (), emb)
        for lid, label in pred.node_labels.items():
            node = local.nodes[lid]
            node.class_label = label
            node.class_scores = pred.node_scores[lid]
        for e in local.edges.values():
            key = (min(e.src, e.dst), max(e.src, e.dst))
            if e.edge_type in ("proximal", "contact") and key in pred.edge_labels:
                e.relation_label = pred.edge_labels[key]
        predictions.append(pred)
        if frame.gt_class:
            jg = assemble_joint_graph(local, None, None, params.config.features)
            nl, el = frame_labels(local, jg, frame, classes)
            for r in range(len(nl)):
                if nl[r] >= 0:
                    truth["node_true"].append(int(nl[r]))
                    truth["node_pred"].append(classes.index(pred.node_labels[jg.node_keys[r][1]]))
            for k, lab in zip(jg.local_edge_keys(), el.tolist()):
                truth["edge_true"].append(lab)
                truth["edge_pred"].append(EDGE_CLASSES.index(pred.edge_labels[k]))

    def after(i, frame, local, fused, glob):
        # new instances already copied their local scores during fusion
        updated = set(fused.updated)
        scores = {g: s for g, s in predictions[-1].enrichment(fused.local_to_global).items()
                  if g in updated}
        enrich_global_features(glob, scores, class_names=classes)
        if kg is not None:
            link_global_to_concepts(glob, kg, cfg.kg.language)

    build = _process(frames, cfg, before, after)
    report = {"frames": len(frames), "context": context}
    if truth["node_true"] or truth["edge_true"]:
        report.update({
            "node_accuracy": accuracy(truth["node_true"], truth["node_pred"]),
            "node_macro_f1": macro_f1(truth["node_true"], truth["node_pred"], len(classes)),
            "edge_accuracy": accuracy(truth["edge_true"], truth["edge_pred"]),
            "edge_macro_f1": macro_f1(truth["edge_true"], truth["edge_pred"], len(EDGE_CLASSES)),
            "labeled_nodes": len(truth["node_true"]),
            "candidate_edges": len(truth["edge_true"]),
        })
    return InferResult(build, predictions, report)

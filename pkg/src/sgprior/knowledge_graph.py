"""ConceptNet-style knowledge graphs: streaming parse, n-hop extraction, embeddings."""
from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

import numpy as np

from .scene_model import SceneGraph

logger = logging.getLogger(__name__)

DEFAULT_RELATIONS = frozenset(
    {"AtLocation", "UsedFor", "PartOf", "MadeOf", "LocatedNear", "IsA", "RelatedTo"})
DEFAULT_MAX_NODES = 50_000
OVERSAMPLE = 10

_CONCEPT_RE = re.compile(r"^/c/([a-z]{2,3}(?:-[a-z0-9]+)?)/([^/\s]+)(?:/.*)?$")
_RELATION_RE = re.compile(r"^/r/([A-Za-z_]+)$")

Relation = Tuple[str, str, str, float]


class KnowledgeGraphError(ValueError):
    pass


def normalize_term(text: str) -> str:
    return "_".join(text.strip().lower().split())


def concept_id(label: str, language: str = "en") -> str:
    """Concept id for a class label, e.g. ``"Coffee Table"`` -> ``/c/en/coffee_table``."""
    term = normalize_term(label)
    if not term:
        raise KnowledgeGraphError("empty concept label")
    return f"/c/{language}/{term}"


def parse_concept_uri(uri: str) -> Optional[Tuple[str, str]]:
    """``(language, normalized id)`` or None when the URI is malformed.

    Path segments after the term (part of speech, sense) are stripped.
    """
    m = _CONCEPT_RE.match(uri)
    if m is None:
        return None
    lang, term = m.group(1), m.group(2).lower()
    return lang, f"/c/{lang}/{term}"


@dataclass
class KnowledgeGraph:
    concepts: Set[str] = field(default_factory=set)
    relations: List[Relation] = field(default_factory=list)
    embeddings: Optional[Dict[str, np.ndarray]] = None
    truncated: bool = False
    missing_seeds: List[str] = field(default_factory=list)

    def check(self) -> None:
        for src, _, dst, w in self.relations:
            if src not in self.concepts or dst not in self.concepts:
                raise KnowledgeGraphError(f"relation endpoint missing: {src} -> {dst}")
            if not w > 0:
                raise KnowledgeGraphError(f"non-positive weight {w}")
        if self.embeddings:
            dims = {len(v) for v in self.embeddings.values()}
            if len(dims) > 1:
                raise KnowledgeGraphError(f"inconsistent embedding dimensions {sorted(dims)}")

    @property
    def embedding_dim(self) -> Optional[int]:
        if not self.embeddings:
            return None
        return len(next(iter(self.embeddings.values())))

    def relation_names(self) -> List[str]:
        return sorted({r for _, r, _, _ in self.relations})

    def neighbors(self, relation_whitelist: Optional[Iterable[str]] = None) -> Dict[str, Set[str]]:
        allowed = None if relation_whitelist is None else set(relation_whitelist)
        adj: Dict[str, Set[str]] = defaultdict(set)
        for src, rel, dst, _ in self.relations:
            if allowed is None or rel in allowed:
                adj[src].add(dst)
                adj[dst].add(src)
        return adj


@dataclass
class ParseStats:
    total_rows: int = 0
    retained: int = 0
    filtered: int = 0
    malformed: int = 0

    @property
    def skipped(self) -> int:
        return self.filtered + self.malformed


@dataclass(frozen=True)
class ExtractionSpec:
    seed_classes: Tuple[str, ...]
    relation_whitelist: FrozenSet[str] = DEFAULT_RELATIONS
    language: str = "en"
    hops: int = 1
    max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        object.__setattr__(self, "seed_classes", tuple(self.seed_classes))
        object.__setattr__(self, "relation_whitelist", frozenset(self.relation_whitelist))
        if self.hops < 0:
            raise ValueError("hops must be >= 0")
        if not self.seed_classes:
            raise ValueError("seed_classes must be non-empty")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")


def _row_weight(meta: str) -> Optional[float]:
    """Weight from the JSON metadata field; 1.0 when absent, None when malformed."""
    try:
        doc = json.loads(meta)
        w = float(doc.get("weight", 1.0))
    except (ValueError, TypeError, AttributeError):
        return None
    return w if 0 < w < float("inf") else None


def parse_dump_lines(lines: Iterable[str], language: str = "en",
                     relation_whitelist: Optional[Iterable[str]] = DEFAULT_RELATIONS,
                     stats: Optional[ParseStats] = None) -> KnowledgeGraph:
    """Filter assertion rows into a KnowledgeGraph.

    ``relation_whitelist=None`` keeps every relation. Malformed rows are
    counted in ``stats`` and skipped.
    """
    stats = stats if stats is not None else ParseStats()
    allowed = None if relation_whitelist is None else frozenset(relation_whitelist)
    kg = KnowledgeGraph()
    concepts = kg.concepts
    relations = kg.relations
    for line in lines:
        line = line.rstrip("\r\n")
        if not line:
            continue
        stats.total_rows += 1
        parts = line.split("\t")
        if len(parts) != 5:
            stats.malformed += 1
            continue
        _, rel_uri, start, end, meta = parts
        rm = _RELATION_RE.match(rel_uri)
        a = parse_concept_uri(start)
        b = parse_concept_uri(end)
        if rm is None or a is None or b is None:
            stats.malformed += 1
            continue
        rel = rm.group(1)
        if a[0] != language or b[0] != language or (allowed is not None and rel not in allowed):
            stats.filtered += 1
            continue
        w = _row_weight(meta)
        if w is None:
            stats.malformed += 1
            continue
        concepts.add(a[1])
        concepts.add(b[1])
        relations.append((a[1], rel, b[1], w))
        stats.retained += 1
    if stats.retained == 0 and stats.total_rows:
        logger.warning("no assertion rows retained out of %d", stats.total_rows)
    return kg


def parse_dump(path: Union[str, Path], language: str = "en",
               relation_whitelist: Optional[Iterable[str]] = DEFAULT_RELATIONS,
               stats: Optional[ParseStats] = None) -> KnowledgeGraph:
    """Stream a tab-separated assertion dump from disk (``.gz`` supported)."""
    path = Path(path)
    if path.suffix == ".gz":
        import gzip

        opener = lambda: gzip.open(path, "rt", encoding="utf-8")  # noqa: E731
    else:
        opener = lambda: open(path, "r", encoding="utf-8")  # noqa: E731
    try:
        fh = opener()
    except OSError as exc:
        raise KnowledgeGraphError(f"cannot read dump {path}: {exc}") from exc
    with fh:
        return parse_dump_lines(fh, language, relation_whitelist, stats)


def extract_subgraph(kg: KnowledgeGraph, spec: ExtractionSpec) -> KnowledgeGraph:
    """Breadth-first n-hop neighbourhood of the seed classes.

    Relations are traversed in both directions. Each frontier is expanded in
    sorted concept order; once ``max_nodes`` concepts are collected the
    search stops and the result is flagged as truncated.
    """
    seeds, missing = [], []
    for label in spec.seed_classes:
        cid = concept_id(label, spec.language)
        (seeds if cid in kg.concepts else missing).append(cid)
    if missing:
        logger.info("seed classes without a concept: %s", missing)
    adj = kg.neighbors(spec.relation_whitelist)

    visited: Set[str] = set()
    truncated = False
    frontier = []
    for cid in sorted(set(seeds)):
        if len(visited) >= spec.max_nodes:
            truncated = True
            break
        visited.add(cid)
        frontier.append(cid)
    for _ in range(spec.hops):
        if truncated or not frontier:
            break
        nxt = []
        for node in frontier:
            for nb in sorted(adj.get(node, ())):
                if nb in visited:
                    continue
                if len(visited) >= spec.max_nodes:
                    truncated = True
                    break
                visited.add(nb)
                nxt.append(nb)
            if truncated:
                break
        frontier = sorted(nxt)

    out = KnowledgeGraph(concepts=visited, truncated=truncated, missing_seeds=missing)
    out.relations = [r for r in kg.relations
                     if r[1] in spec.relation_whitelist and r[0] in visited and r[2] in visited]
    if kg.embeddings:
        out.embeddings = {c: v for c, v in kg.embeddings.items() if c in visited}
    return out


@dataclass
class EmbeddingCoverage:
    attached: int
    total: int

    @property
    def ratio(self) -> float:
        return self.attached / self.total if self.total else 0.0


def _vector_key(key: str, language: str) -> Optional[str]:
    if key.startswith("/c/"):
        parsed = parse_concept_uri(key)
        return parsed[1] if parsed else None
    return f"/c/{language}/{normalize_term(key)}"


def iter_vector_table(lines: Iterable[str]):
    """Yield ``(lineno, key, vector)`` from either table flavour.

    Accepts the ``EMB <count> <dim>`` header, a word2vec ``<count> <dim>``
    header, or no header at all; dimensions must agree across rows.
    """
    dim = None
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if lineno == 1:
            if parts[0] == "EMB" and len(parts) == 3:
                dim = int(parts[2])
                continue
            if len(parts) == 2 and all(p.isdigit() for p in parts):
                dim = int(parts[1])
                continue
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise KnowledgeGraphError(f"line {lineno}: non-numeric vector component") from None
        if dim is None:
            dim = len(vec)
        if len(vec) != dim or dim == 0:
            raise KnowledgeGraphError(
                f"line {lineno}: dimension {len(vec)} inconsistent with {dim}")
        yield lineno, parts[0], vec


def load_numberbatch(path: Union[str, Path], kg: KnowledgeGraph,
                     language: str = "en") -> EmbeddingCoverage:
    """Attach vectors for every concept of ``kg`` found in the table (in place)."""
    found: Dict[str, np.ndarray] = {}
    seen: Set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, key, vec in iter_vector_table(fh):
            if key in seen:
                raise KnowledgeGraphError(f"line {lineno}: duplicate key {key!r}")
            seen.add(key)
            cid = _vector_key(key, language)
            if cid is not None and cid in kg.concepts:
                if cid in found:
                    raise KnowledgeGraphError(f"line {lineno}: duplicate concept {cid!r}")
                found[cid] = vec
    kg.embeddings = found
    cov = EmbeddingCoverage(len(found), len(kg.concepts))
    logger.info("embedding coverage %d/%d", cov.attached, cov.total)
    return cov


def normalized_adjacency(kg: KnowledgeGraph) -> Tuple[List[str], np.ndarray]:
    """Sorted concept list and ``D^-1/2 A D^-1/2`` with symmetrized weights."""
    order = sorted(kg.concepts)
    index = {c: i for i, c in enumerate(order)}
    a = np.zeros((len(order), len(order)))
    for src, _, dst, w in kg.relations:
        if src == dst:
            continue
        i, j = index[src], index[dst]
        a[i, j] += w
        a[j, i] += w
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return order, a * inv[:, None] * inv[None, :]


def spectral_embed(kg: KnowledgeGraph, dim: int, iterations: int = 500,
                   seed: int = 0) -> KnowledgeGraph:
    """Leading eigenvectors of the normalized adjacency via subspace iteration.

    Iterates on ``(S + I) / 2`` so that the largest algebraic eigenvalues of
    ``S`` dominate, re-orthonormalizing with QR each step, then finishes with
    a Rayleigh-Ritz rotation. The block carries ``OVERSAMPLE`` extra vectors
    that are dropped after the rotation. Isolated concepts get zero rows. Attaches the
    result to ``kg`` in place and returns it.
    """
    n = len(kg.concepts)
    if n == 0:
        raise KnowledgeGraphError("cannot embed an empty graph")
    if dim < 1 or dim > n:
        raise KnowledgeGraphError(f"dim must be in [1, {n}], got {dim}")
    order, s = normalized_adjacency(kg)
    active = np.flatnonzero(np.abs(s).sum(axis=1) > 0)
    out = np.zeros((n, dim))
    if len(active):
        sub = s[np.ix_(active, active)]
        op = 0.5 * (sub + np.eye(len(active)))
        k = min(dim, len(active))
        # oversampling widens the effective eigengap of the iteration
        block = min(len(active), k + OVERSAMPLE)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((len(active), block)))
        for _ in range(iterations):
            q, _ = np.linalg.qr(op @ q)
        ritz = q.T @ sub @ q
        vals, vecs = np.linalg.eigh(0.5 * (ritz + ritz.T))
        q = q @ vecs[:, ::-1][:, :k]
        for c in range(k):
            pivot = np.argmax(np.abs(q[:, c]))
            if q[pivot, c] < 0:
                q[:, c] = -q[:, c]
        out[active, :k] = q
    kg.embeddings = {c: out[i].copy() for i, c in enumerate(order)}
    return kg


@dataclass
class LinkReport:
    edges: List[int] = field(default_factory=list)
    unmatched: Dict[int, str] = field(default_factory=dict)


def link_global_to_concepts(global_graph: SceneGraph, kg: KnowledgeGraph,
                            language: str = "en") -> LinkReport:
    """Ground labeled global objects in matching concept nodes.

    Concept nodes are created on demand (``class_label`` holds the concept
    id). A node's previous grounding is replaced.
    """
    report = LinkReport()
    with global_graph.lock:
        concept_nodes = {n.class_label: n.id for n in global_graph.nodes_of_type("concept")}
        for node in global_graph.nodes_of_type("global_object"):
            for e in global_graph.out_edges(node.id, "grounded_in"):
                global_graph.remove_edge(e.id)
            if not node.class_label:
                continue
            cid = concept_id(node.class_label, language)
            if cid not in kg.concepts:
                report.unmatched[node.id] = node.class_label
                continue
            if cid not in concept_nodes:
                concept_nodes[cid] = global_graph.add_node("concept", class_label=cid)
            report.edges.append(global_graph.add_edge(node.id, concept_nodes[cid], "grounded_in"))
    if report.unmatched:
        logger.info("labels without a concept: %s", sorted(set(report.unmatched.values())))
    return report


def write_kg_json(kg: KnowledgeGraph) -> dict:
    return {
        "concepts": sorted(kg.concepts),
        "relations": [[s, r, d, float(f"{w:.9g}")] for s, r, d, w in sorted(kg.relations)],
        "truncated": kg.truncated,
        "missing_seeds": list(kg.missing_seeds),
        "embeddings": None if kg.embeddings is None else {
            c: [float(f"{x:.9g}") for x in v] for c, v in sorted(kg.embeddings.items())},
    }


def read_kg_json(doc: dict) -> KnowledgeGraph:
    try:
        kg = KnowledgeGraph(
            concepts=set(doc["concepts"]),
            relations=[(s, r, d, float(w)) for s, r, d, w in doc["relations"]],
            truncated=bool(doc.get("truncated", False)),
            missing_seeds=list(doc.get("missing_seeds", [])),
        )
        emb = doc.get("embeddings")
        if emb is not None:
            kg.embeddings = {c: np.asarray(v, dtype=np.float64) for c, v in emb.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise KnowledgeGraphError(f"malformed knowledge graph document: {exc}") from exc
    kg.check()
    return kg

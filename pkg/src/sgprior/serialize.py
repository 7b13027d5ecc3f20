"""Canonical JSON exchange format for scene graphs, plus a DOT export.

Documents have the shape ``{"nodes": [...], "edges": [...], "meta": {...}}``
with nodes and edges sorted by id, keys sorted, and every float rounded to
9 significant digits, so equal graphs always serialize to equal bytes.
"""
from __future__ import annotations

import json
from typing import Any, Dict, List, Optional

import numpy as np

from .scene_model import (
    AABB,
    EDGE_TYPES,
    NODE_TYPES,
    Geometry,
    GraphError,
    SceneGraph,
    SparseVoxelGrid,
)

FORMAT = "sgprior-graph"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    """A graph document does not follow the exchange schema."""


def _f(x) -> float:
    return float(f"{float(x):.9g}")


def _vec(v) -> Optional[List[float]]:
    return None if v is None else [_f(x) for x in np.asarray(v).reshape(-1)]


def graph_to_dict(graph: SceneGraph, meta: Optional[Dict[str, Any]] = None) -> dict:
    nodes = []
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        doc = {
            "id": n.id,
            "type": n.node_type,
            "layer": n.layer,
            "class_label": n.class_label,
            "class_scores": _vec(n.class_scores),
            "observation_count": n.observation_count,
            "score_count": n.score_count,
            "segment_id": n.segment_id,
            "descriptor": _vec(n.descriptor),
            "embedding": _vec(n.embedding),
        }
        if n.geometry is not None:
            doc["box"] = {"min": _vec(n.box.min), "max": _vec(n.box.max)}
            doc["grid"] = {"resolution": _f(n.grid.resolution),
                           "cells": n.grid.array.tolist()}
        nodes.append(doc)
    edges = []
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        edges.append({
            "id": e.id,
            "src": e.src,
            "dst": e.dst,
            "type": e.edge_type,
            "relation_label": e.relation_label,
            "features": _vec(e.features),
            "kg_relation": e.kg_relation,
        })
    m = {"format": FORMAT, "version": FORMAT_VERSION,
         "next_node_id": graph.next_node_id, "next_edge_id": graph.next_edge_id}
    for k, v in (meta or {}).items():
        if k in m:
            raise ValueError(f"meta key {k!r} is reserved")
        m[k] = v
    return {"nodes": nodes, "edges": edges, "meta": m}


def serialize_graph(graph: SceneGraph, meta: Optional[Dict[str, Any]] = None) -> str:
    return json.dumps(graph_to_dict(graph, meta), sort_keys=True, indent=1) + "\n"


def _get(doc: dict, key: str, kinds, where: str, optional: bool = False):
    if key not in doc:
        if optional:
            return None
        raise SchemaError(f"{where}: missing key {key!r}")
    v = doc[key]
    if v is None and optional:
        return None
    # bool is an int subclass but never a valid value here
    if isinstance(v, bool) or not isinstance(v, kinds):
        raise SchemaError(f"{where}: key {key!r} has wrong type {type(v).__name__}")
    return v


def _array(doc: dict, key: str, where: str) -> Optional[np.ndarray]:
    v = _get(doc, key, list, where, optional=True)
    if v is None:
        return None
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise SchemaError(f"{where}: {key!r} must be a list of numbers")
    return np.asarray(v, dtype=np.float64)


def graph_from_dict(doc: Any) -> SceneGraph:
    if not isinstance(doc, dict) or set(doc) != {"nodes", "edges", "meta"}:
        raise SchemaError("document must have exactly the keys nodes, edges, meta")
    meta = doc["meta"]
    if not isinstance(meta, dict) or meta.get("format") != FORMAT:
        raise SchemaError("meta.format is missing or unknown")
    if meta.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported version {meta.get('version')!r}")
    if not isinstance(doc["nodes"], list) or not isinstance(doc["edges"], list):
        raise SchemaError("nodes and edges must be lists")
    g = SceneGraph()
    last = -1
    try:
        for i, nd in enumerate(doc["nodes"]):
            where = f"nodes[{i}]"
            if not isinstance(nd, dict):
                raise SchemaError(f"{where}: not an object")
            nid = _get(nd, "id", int, where)
            if nid <= last:
                raise SchemaError(f"{where}: ids must be strictly increasing")
            last = nid
            ntype = _get(nd, "type", str, where)
            if ntype not in NODE_TYPES:
                raise SchemaError(f"{where}: unknown node type {ntype!r}")
            geometry = None
            if "grid" in nd or "box" in nd:
                box = _get(nd, "box", dict, where)
                grid = _get(nd, "grid", dict, where)
                cells = _get(grid, "cells", list, where + ".grid")
                if not all(isinstance(c, list) and len(c) == 3 and
                           all(isinstance(x, int) for x in c) for c in cells):
                    raise SchemaError(f"{where}.grid: cells must be integer triples")
                res = _get(grid, "resolution", (int, float), where + ".grid")
                lo, hi = _array(box, "min", where + ".box"), _array(box, "max", where + ".box")
                if lo is None or hi is None or lo.shape != (3,) or hi.shape != (3,):
                    raise SchemaError(f"{where}.box: min and max must be 3-vectors")
                geometry = Geometry(AABB(tuple(lo.tolist()), tuple(hi.tolist())),
                                    SparseVoxelGrid(res, [tuple(c) for c in cells]))
            g.next_node_id = nid
            g.add_node(
                ntype,
                layer=_get(nd, "layer", int, where),
                geometry=geometry,
                descriptor=_array(nd, "descriptor", where),
                class_label=_get(nd, "class_label", str, where, optional=True),
                class_scores=_array(nd, "class_scores", where),
                observation_count=_get(nd, "observation_count", int, where),
                segment_id=_get(nd, "segment_id", int, where, optional=True),
                embedding=_array(nd, "embedding", where),
                score_count=_get(nd, "score_count", int, where),
            )
        last = -1
        for i, ed in enumerate(doc["edges"]):
            where = f"edges[{i}]"
            if not isinstance(ed, dict):
                raise SchemaError(f"{where}: not an object")
            eid = _get(ed, "id", int, where)
            if eid <= last:
                raise SchemaError(f"{where}: ids must be strictly increasing")
            last = eid
            etype = _get(ed, "type", str, where)
            if etype not in EDGE_TYPES:
                raise SchemaError(f"{where}: unknown edge type {etype!r}")
            src, dst = _get(ed, "src", int, where), _get(ed, "dst", int, where)
            for end in (src, dst):
                if end not in g.nodes:
                    raise SchemaError(f"{where}: references missing node {end}")
            g.next_edge_id = eid
            g.add_edge(src, dst, etype,
                       relation_label=_get(ed, "relation_label", str, where, optional=True),
                       features=_array(ed, "features", where),
                       kg_relation=_get(ed, "kg_relation", str, where, optional=True))
    except GraphError as exc:
        raise SchemaError(f"invalid graph: {exc}") from exc
    for key, floor in (("next_node_id", g.next_node_id), ("next_edge_id", g.next_edge_id)):
        v = meta.get(key)
        if not isinstance(v, int) or v < floor:
            raise SchemaError(f"meta.{key} must be an integer >= {floor}")
    g.next_node_id = meta["next_node_id"]
    g.next_edge_id = meta["next_edge_id"]
    return g


def deserialize_graph(data) -> SceneGraph:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from None
    return graph_from_dict(doc)


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(graph: SceneGraph, name: str = "scene") -> str:
    """Graphviz rendering; one cluster per node type."""
    lines = [f"digraph {_dot_id(name)} {{", "  rankdir=BT;"]
    for ntype in NODE_TYPES:
        nodes = graph.nodes_of_type(ntype)
        if not nodes:
            continue
        lines.append(f"  subgraph {_dot_id('cluster_' + ntype)} {{")
        lines.append(f"    label={_dot_id(ntype)};")
        for n in nodes:
            label = f"{n.id}: {n.class_label or ntype}"
            lines.append(f"    n{n.id} [label={_dot_id(label)}];")
        lines.append("  }")
    styles = {"proximal": "dotted", "contact": "dashed", "supports": "bold",
              "same_instance": "solid", "grounded_in": "solid", "related": "solid"}
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        label = e.relation_label or e.kg_relation or e.edge_type
        lines.append(f"  n{e.src} -> n{e.dst} [label={_dot_id(label)}, "
                     f"style={styles[e.edge_type]}];")
    lines.append("}")
    return "\n".join(lines) + "\n"

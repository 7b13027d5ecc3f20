"""Heterogeneous mean-aggregation message passing with node and edge heads.

Per layer ``l`` every node is updated as::

    h_v <- relu(W_self h_v + b + sum_t W_t mean{h_u : u ->t v})

with one ``W_t`` per message type and an empty neighbourhood contributing a
zero mean. Inputs are standardized and projected per node kind first. The
standardization tensors (``norm/...``) are fixed statistics of the training
features, fitted once by ``fit_input_norm``; they are stored with the other
parameters but receive no gradient. The node head scores local and global
rows; the edge head scores local candidate edges from
``[h_src, h_dst, edge_feature]``. Gradients are derived by hand below.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import EDGE_FEATURE_DIM, MESSAGE_TYPES, NODE_KINDS, FeatureConfig, JointGraph

EDGE_CLASSES = ("none", "supports", "standing_on", "contact", "next_to")


class NumericError(ArithmeticError):
    """A forward or backward pass produced a non-finite value."""


@dataclass(frozen=True)
class ModelConfig:
    num_node_classes: int
    num_edge_classes: int = len(EDGE_CLASSES)
    hidden_dim: int = 64
    num_layers: int = 2
    lambda_edge: float = 1.0
    class_weight_clip: Tuple[float, float] = (0.1, 10.0)
    local_embedding_dim: int = 0
    global_embedding_dim: int = 0
    concept_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_weight_clip", tuple(self.class_weight_clip))
        if min(self.num_node_classes, self.num_edge_classes, self.hidden_dim) < 1:
            raise ValueError("class counts and hidden_dim must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.lambda_edge < 0:
            raise ValueError("lambda_edge must be >= 0")
        lo, hi = self.class_weight_clip
        if not 0 < lo <= hi:
            raise ValueError("class_weight_clip must satisfy 0 < lo <= hi")

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(self.num_node_classes, self.local_embedding_dim,
                             self.global_embedding_dim, self.concept_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weight_clip"] = list(self.class_weight_clip)
        return d


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name with its shape, in canonical order."""
    h = cfg.hidden_dim
    dims = cfg.features.input_dims()
    shapes: Dict[str, Tuple[int, ...]] = {}
    for kind in NODE_KINDS:
        shapes[f"norm/{kind}/shift"] = (dims[kind],)
        shapes[f"norm/{kind}/scale"] = (dims[kind],)
    for kind in NODE_KINDS:
        shapes[f"in/{kind}/W"] = (h, dims[kind])
        shapes[f"in/{kind}/b"] = (h,)
    for layer in range(cfg.num_layers):
        shapes[f"layer{layer}/self/W"] = (h, h)
        shapes[f"layer{layer}/self/b"] = (h,)
        for t in MESSAGE_TYPES:
            shapes[f"layer{layer}/msg/{t}/W"] = (h, h)
    shapes["node_head/W"] = (cfg.num_node_classes, h)
    shapes["node_head/b"] = (cfg.num_node_classes,)
    shapes["edge_head/W"] = (cfg.num_edge_classes, 2 * h + EDGE_FEATURE_DIM)
    shapes["edge_head/b"] = (cfg.num_edge_classes,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.startswith("norm/")


def trainable_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    return {k: v for k, v in param_shapes(cfg).items() if is_trainable(k)}


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        """Trainable parameter names in canonical order."""
        return list(trainable_shapes(self.config))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def check(self) -> None:
        for name, shape in param_shapes(self.config).items():
            t = self.tensors.get(name)
            if t is None or t.shape != shape:
                raise ValueError(f"parameter {name} missing or not of shape {shape}")
            if not np.all(np.isfinite(t)):
                raise NumericError(f"parameter {name} is not finite")

    def equal(self, other: "ModelParams") -> bool:
        return self.config == other.config and self.tensors.keys() == other.tensors.keys() and \
            all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in canonical name order.

    Input standardization starts as the identity.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("/scale"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(cfg, tensors)


def fit_input_norm(params: ModelParams, feature_sets: Sequence[Dict[str, np.ndarray]],
                   min_std: float = 1e-6) -> ModelParams:
    """Copy of ``params`` whose standardization maps the given features to zero
    mean and unit variance per column. Near-constant columns are only centred."""
    out = params.copy()
    dims = params.config.features.input_dims()
    for kind in NODE_KINDS:
        blocks = [f[kind] for f in feature_sets if len(f[kind])]
        if not blocks:
            continue
        x = np.vstack(blocks)
        if x.shape[1] != dims[kind]:
            raise ValueError(f"{kind} features have {x.shape[1]} columns, expected {dims[kind]}")
        std = x.std(axis=0)
        out.tensors[f"norm/{kind}/shift"] = x.mean(axis=0)
        out.tensors[f"norm/{kind}/scale"] = np.where(std > min_std, 1.0 / np.maximum(std, min_std), 1.0)
    out.check()
    return out


def standardized(params: ModelParams, kind: str, x: np.ndarray) -> np.ndarray:
    p = params.tensors
    return (x - p[f"norm/{kind}/shift"]) * p[f"norm/{kind}/scale"]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mean_aggregate(h: np.ndarray, src: np.ndarray, dst: np.ndarray,
                    deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(h)
    if len(src):
        np.add.at(out, dst, h[src])
        nz = deg > 0
        out[nz] /= deg[nz, None]
    return out


@dataclass
class ForwardCache:
    hidden: List[np.ndarray] = field(default_factory=list)      # H_0 .. H_L
    pre: List[np.ndarray] = field(default_factory=list)         # Z_1 .. Z_L
    means: List[Dict[str, np.ndarray]] = field(default_factory=list)
    degrees: Dict[str, np.ndarray] = field(default_factory=dict)
    edge_input: Optional[np.ndarray] = None
    inputs: Dict[str, np.ndarray] = field(default_factory=dict)   # standardized features


@dataclass
class ForwardOutput:
    node_logits: np.ndarray
    node_probs: np.ndarray      # rows: local then global
    edge_logits: np.ndarray
    edge_probs: np.ndarray
    cache: ForwardCache


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def forward(params: ModelParams, jg: JointGraph) -> ForwardOutput:
    cfg = params.config
    p = params.tensors
    n = jg.num_nodes
    h = np.zeros((n, cfg.hidden_dim))
    slices = {kind: jg.kind_slice(kind) for kind in NODE_KINDS}
    cache = ForwardCache()
    for kind in NODE_KINDS:
        sl = slices[kind]
        if sl.stop > sl.start:
            x = standardized(params, kind, jg.features[kind])
            cache.inputs[kind] = x
            h[sl] = x @ p[f"in/{kind}/W"].T + p[f"in/{kind}/b"]
    cache.hidden.append(h)
    for t in MESSAGE_TYPES:
        src, dst = jg.messages[t]
        cache.degrees[t] = np.bincount(dst, minlength=n).astype(np.float64)
    active = [t for t in MESSAGE_TYPES if len(jg.messages[t][0])]

    for layer in range(cfg.num_layers):
        means = {t: _mean_aggregate(h, *jg.messages[t], cache.degrees[t]) for t in active}
        z = np.empty_like(h)
        ws, bs = p[f"layer{layer}/self/W"], p[f"layer{layer}/self/b"]
        # row blocks per kind keep each kind's arithmetic independent of the others
        for kind in NODE_KINDS:
            sl = slices[kind]
            if sl.stop == sl.start:
                continue
            zb = h[sl] @ ws.T + bs
            for t in active:
                if cache.degrees[t][sl].any():
                    zb = zb + means[t][sl] @ p[f"layer{layer}/msg/{t}/W"].T
            z[sl] = zb
        _check_finite(z, f"layer {layer} pre-activation")
        h = np.maximum(z, 0.0)
        cache.pre.append(z)
        cache.means.append(means)
        cache.hidden.append(h)

    rows = jg.scored_rows()
    node_logits = np.empty((rows.stop, cfg.num_node_classes))
    for kind in ("local", "global"):
        sl = slices[kind]
        if sl.stop > sl.start:
            node_logits[sl] = h[sl] @ p["node_head/W"].T + p["node_head/b"]
    if len(jg.edge_pairs):
        e_in = np.concatenate([h[jg.edge_pairs[:, 0]], h[jg.edge_pairs[:, 1]],
                               jg.edge_features], axis=1)
    else:
        e_in = np.zeros((0, 2 * cfg.hidden_dim + EDGE_FEATURE_DIM))
    edge_logits = e_in @ p["edge_head/W"].T + p["edge_head/b"]
    cache.edge_input = e_in
    _check_finite(node_logits, "node logits")
    _check_finite(edge_logits, "edge logits")
    return ForwardOutput(node_logits, softmax(node_logits), edge_logits, softmax(edge_logits),
                         cache)


def class_weights(label_lists: Sequence[np.ndarray], num_classes: int,
                  clip: Tuple[float, float] = (0.1, 10.0)) -> np.ndarray:
    """``clip(N_total / (K * N_c))`` from training label counts (``-1`` ignored).

    Classes absent from the training labels get the upper clip value.
    """
    counts = np.zeros(num_classes)
    for labels in label_lists:
        labels = np.asarray(labels, dtype=np.int64)
        labels = labels[labels >= 0]
        if len(labels) and labels.max() >= num_classes:
            raise ValueError(f"label {labels.max()} outside [0, {num_classes})")
        counts += np.bincount(labels, minlength=num_classes)
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (num_classes * np.maximum(counts, 1)), np.inf)
    return np.clip(w, clip[0], clip[1])


@dataclass
class LossTerms:
    total: float
    node: float
    edge: float
    node_grad: np.ndarray   # d total / d node logits (scored rows)
    edge_grad: np.ndarray   # d total / d edge logits


def _weighted_ce(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    grad = np.zeros_like(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and labels.max(initial=-1) >= probs.shape[1]:
        raise ValueError(f"label {labels.max()} outside [0, {probs.shape[1]})")
    idx = np.flatnonzero(labels >= 0)
    if len(idx) == 0:
        return 0.0, grad
    y = labels[idx]
    w = weights[y]
    wsum = w.sum()
    p_true = probs[idx, y]
    loss = float(np.sum(w * -np.log(np.maximum(p_true, 1e-300))) / wsum)
    g = probs[idx].copy()
    g[np.arange(len(idx)), y] -= 1.0
    grad[idx] = g * (w / wsum)[:, None]
    return loss, grad


def composite_loss(out: ForwardOutput, node_labels: np.ndarray, edge_labels: np.ndarray,
                   node_weights: np.ndarray, edge_weights: np.ndarray,
                   lambda_edge: float = 1.0) -> LossTerms:
    """Class-weighted cross-entropy over local nodes plus ``lambda_edge`` times edges.

    ``node_labels`` covers the local rows only (``-1`` = unlabeled); global
    rows never contribute. Each term is a weighted mean, normalized by the
    sum of the weights of its labeled elements.
    """
    n_local = len(node_labels)
    probs = out.node_probs
    node_loss, g_local = _weighted_ce(probs[:n_local], node_labels, node_weights)
    node_grad = np.zeros_like(probs)
    node_grad[:n_local] = g_local
    edge_loss, edge_grad = _weighted_ce(out.edge_probs, edge_labels, edge_weights)
    edge_grad = edge_grad * lambda_edge
    return LossTerms(node_loss + lambda_edge * edge_loss, node_loss, edge_loss,
                     node_grad, edge_grad)


def _scatter_rows(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    if len(rows):
        np.add.at(target, rows, values)


def backward(params: ModelParams, jg: JointGraph, out: ForwardOutput,
             node_logit_grad: np.ndarray, edge_logit_grad: np.ndarray) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar given its gradients w.r.t. the logits.

    Only trainable parameters get an entry.
    """
    cfg = params.config
    p = params.tensors
    cache = out.cache
    grads = {name: np.zeros(shape) for name, shape in trainable_shapes(cfg).items()}
    h_last = cache.hidden[-1]
    dh = np.zeros_like(h_last)
    hd = cfg.hidden_dim

    rows = jg.scored_rows()
    grads["node_head/W"] = node_logit_grad.T @ h_last[rows]
    grads["node_head/b"] = node_logit_grad.sum(axis=0)
    dh[rows] += node_logit_grad @ p["node_head/W"]

    if len(jg.edge_pairs):
        grads["edge_head/W"] = edge_logit_grad.T @ cache.edge_input
        grads["edge_head/b"] = edge_logit_grad.sum(axis=0)
        d_in = edge_logit_grad @ p["edge_head/W"]
        _scatter_rows(dh, jg.edge_pairs[:, 0], d_in[:, :hd])
        _scatter_rows(dh, jg.edge_pairs[:, 1], d_in[:, hd:2 * hd])

    for layer in reversed(range(cfg.num_layers)):
        z = cache.pre[layer]
        h_prev = cache.hidden[layer]
        dz = dh * (z > 0)
        grads[f"layer{layer}/self/W"] = dz.T @ h_prev
        grads[f"layer{layer}/self/b"] = dz.sum(axis=0)
        dh = dz @ p[f"layer{layer}/self/W"]
        for t, mean in cache.means[layer].items():
            w = p[f"layer{layer}/msg/{t}/W"]
            grads[f"layer{layer}/msg/{t}/W"] = dz.T @ mean
            dmean = dz @ w
            src, dst = jg.messages[t]
            deg = cache.degrees[t]
            scale = np.zeros_like(deg)
            nz = deg > 0
            scale[nz] = 1.0 / deg[nz]
            _scatter_rows(dh, src, dmean[dst] * scale[dst, None])

    for kind in NODE_KINDS:
        sl = jg.kind_slice(kind)
        if sl.stop == sl.start:
            continue
        grads[f"in/{kind}/W"] = dh[sl].T @ cache.inputs[kind]
        grads[f"in/{kind}/b"] = dh[sl].sum(axis=0)
    for name, g in grads.items():
        _check_finite(g, f"gradient of {name}")
    return grads


def loss_and_grad(params: ModelParams, jg: JointGraph, node_labels: np.ndarray,
                  edge_labels: np.ndarray, node_weights: np.ndarray,
                  edge_weights: np.ndarray) -> Tuple[LossTerms, Dict[str, np.ndarray]]:
    out = forward(params, jg)
    terms = composite_loss(out, node_labels, edge_labels, node_weights, edge_weights,
                           params.config.lambda_edge)
    grads = backward(params, jg, out, terms.node_grad, terms.edge_grad)
    return terms, grads

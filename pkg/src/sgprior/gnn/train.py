"""Plain SGD trainer and classification metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dataset import TrainBatch
from .model import (ModelParams, NumericError, backward, class_weights, composite_loss,
                    fit_input_norm, forward)

logger = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, last_finite: Optional[float], detail: str = ""):
        self.epoch = epoch
        self.last_finite = last_finite
        msg = f"training diverged in epoch {epoch}; last finite epoch loss {last_finite}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class TrainResult:
    params: ModelParams
    losses: List[float] = field(default_factory=list)
    node_weights: Optional[np.ndarray] = None
    edge_weights: Optional[np.ndarray] = None


def dataset_class_weights(batches: Sequence[TrainBatch], params: ModelParams):
    cfg = params.config
    nw = class_weights([b.node_labels for b in batches], cfg.num_node_classes,
                       cfg.class_weight_clip)
    ew = class_weights([b.edge_labels for b in batches], cfg.num_edge_classes,
                       cfg.class_weight_clip)
    return nw, ew


def standardize_for(params: ModelParams, batches: Sequence[TrainBatch]) -> ModelParams:
    """Fit the input standardization to the node features of ``batches``."""
    return fit_input_norm(params, [b.graph.features for b in batches])


def train(params: ModelParams, batches: Sequence[TrainBatch], tcfg: TrainConfig = TrainConfig(),
          node_weights: Optional[np.ndarray] = None, edge_weights: Optional[np.ndarray] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """SGD with one update per batch; returns a new params object.

    Only trainable tensors move; the input standardization is left as given,
    so callers fit it beforehand with ``standardize_for``.

    The recorded loss for an epoch is the mean batch loss seen during that
    epoch, each evaluated just before its update.
    """
    if not batches:
        raise ValueError("training needs at least one batch")
    params = params.copy()
    if node_weights is None or edge_weights is None:
        nw, ew = dataset_class_weights(batches, params)
        node_weights = nw if node_weights is None else node_weights
        edge_weights = ew if edge_weights is None else edge_weights
    rng = np.random.default_rng(tcfg.seed)
    lam = params.config.lambda_edge
    losses: List[float] = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(batches)) if tcfg.shuffle else np.arange(len(batches))
        total = 0.0
        for i in order.tolist():
            b = batches[i]
            try:
                # overflow surfaces as a NumericError from the finiteness checks
                with np.errstate(over="ignore", invalid="ignore"):
                    out = forward(params, b.graph)
                    terms = composite_loss(out, b.node_labels, b.edge_labels, node_weights,
                                           edge_weights, lam)
                    if not np.isfinite(terms.total):
                        raise NumericError(f"non-finite loss on batch {b.name or i}")
                    grads = backward(params, b.graph, out, terms.node_grad, terms.edge_grad)
            except NumericError as exc:
                raise TrainingDiverged(epoch, losses[-1] if losses else None, str(exc)) from exc
            total += terms.total
            if tcfg.learning_rate:
                for name, g in grads.items():
                    params.tensors[name] -= tcfg.learning_rate * g
        losses.append(total / len(batches))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        logger.debug("epoch %d loss %.6f", epoch, losses[-1])
    return TrainResult(params, losses, node_weights, edge_weights)


def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return m


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    """Mean F1 over the classes that occur in either labels or predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        return 0.0
    m = confusion(y_true, y_pred, num_classes)
    tp = np.diag(m).astype(float)
    support = m.sum(axis=1)
    predicted = m.sum(axis=0)
    present = (support + predicted) > 0
    f1 = np.where(present, 2 * tp / np.maximum(support + predicted, 1), 0.0)
    return float(f1[present].mean())


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred))) if len(y_true) else 0.0


def majority_baseline_f1(y_true, num_classes: int) -> float:
    y_true = np.asarray(y_true, dtype=np.int64)
    if len(y_true) == 0:
        return 0.0
    majority = int(np.argmax(np.bincount(y_true, minlength=num_classes)))
    return macro_f1(y_true, np.full(len(y_true), majority), num_classes)


@dataclass
class Evaluation:
    node_true: np.ndarray
    node_pred: np.ndarray
    edge_true: np.ndarray
    edge_pred: np.ndarray

    def node_accuracy(self) -> float:
        return accuracy(self.node_true, self.node_pred)

    def edge_accuracy(self) -> float:
        return accuracy(self.edge_true, self.edge_pred)


def evaluate(params: ModelParams, batches: Sequence[TrainBatch], conduits: bool = True) -> Evaluation:
    """Argmax predictions on labeled local nodes and all candidate edges."""
    nt, np_, et, ep = [], [], [], []
    for b in batches:
        jg = b.graph if conduits else b.graph.without_conduits()
        out = forward(params, jg)
        n_local = len(b.node_labels)
        mask = b.node_labels >= 0
        nt.append(b.node_labels[mask])
        np_.append(np.argmax(out.node_logits[:n_local], axis=1)[mask])
        et.append(b.edge_labels)
        ep.append(np.argmax(out.edge_logits, axis=1))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    return Evaluation(cat(nt), cat(np_), cat(et), cat(ep))

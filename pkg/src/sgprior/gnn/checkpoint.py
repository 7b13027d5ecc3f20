"""Plain-text parameter checkpoints with exact float round-trip.

Layout::

    SGPRIOR-CHECKPOINT 1
    CONFIG {json}
    TENSOR <name> <ndim> <dims...>
    <one row per line, values in repr form>
    ...
    END

Vectors are written as a single row. Python's ``repr`` of a float is the
shortest string that parses back to the same double, so loading is exact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Union

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes

MAGIC = "SGPRIOR-CHECKPOINT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: ModelParams) -> str:
    lines = [f"{MAGIC} {VERSION}",
             "CONFIG " + json.dumps(params.config.to_dict(), sort_keys=True)]
    for name in param_shapes(params.config):
        t = params.tensors[name]
        lines.append(f"TENSOR {name} {t.ndim} " + " ".join(str(d) for d in t.shape))
        rows = t.reshape(1, -1) if t.ndim == 1 else t
        for row in rows:
            lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("END")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ModelParams:
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [MAGIC]:
        raise CheckpointError("not a checkpoint file")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError("missing checkpoint version") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(lines) < 2 or not lines[1].startswith("CONFIG "):
        raise CheckpointError("missing CONFIG line")
    try:
        cfg = ModelConfig(**json.loads(lines[1][len("CONFIG "):]))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config: {exc}") from None
    shapes = param_shapes(cfg)
    tensors = {}
    i = 2
    while i < len(lines) and lines[i] != "END":
        head = lines[i].split()
        if len(head) < 3 or head[0] != "TENSOR":
            raise CheckpointError(f"line {i + 1}: expected TENSOR header")
        name, ndim = head[1], int(head[2])
        shape = tuple(int(d) for d in head[3:3 + ndim])
        if shapes.get(name) != shape:
            raise CheckpointError(f"tensor {name} has shape {shape}, config expects "
                                  f"{shapes.get(name)}")
        nrows = 1 if ndim == 1 else shape[0]
        rows: List[List[float]] = []
        for r in range(nrows):
            i += 1
            if i >= len(lines):
                raise CheckpointError(f"tensor {name} truncated")
            try:
                row = [float(v) for v in lines[i].split()]
            except ValueError:
                raise CheckpointError(f"line {i + 1}: non-numeric value") from None
            if len(row) != shape[-1]:
                raise CheckpointError(f"line {i + 1}: tensor {name} row has {len(row)} values")
            rows.append(row)
        tensors[name] = np.array(rows, dtype=np.float64).reshape(shape)
        i += 1
    if i >= len(lines):
        raise CheckpointError("missing END marker")
    missing = set(shapes) - set(tensors)
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)}")
    params = ModelParams(cfg, tensors)
    params.check()
    return params


def save(params: ModelParams, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(params))


def load(path: Union[str, Path]) -> ModelParams:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(text)

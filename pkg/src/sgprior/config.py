"""Engine configuration: one JSON document, every key validated.

Sections and their defaults are listed by ``default_config_dict()``; a
config file may give any subset of them. Command-line ``--set`` overrides
use ``section.key=value`` with ``value`` parsed as JSON when possible.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

from .frame_ingest import DEFAULT_MIN_POINTS
from .global_fusion import FusionConfig
from .graph_construct import ConstructConfig
from .knowledge_graph import DEFAULT_MAX_NODES, DEFAULT_RELATIONS, ExtractionSpec
from .scene_model import DEFAULT_RESOLUTION
from .synth import CLASSES

EMBEDDING_SOURCES = ("none", "numberbatch", "spectral")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KGSettings:
    seed_classes: Tuple[str, ...] = CLASSES
    relation_whitelist: Tuple[str, ...] = tuple(sorted(DEFAULT_RELATIONS))
    language: str = "en"
    hops: int = 1
    max_nodes: int = DEFAULT_MAX_NODES
    embedding: str = "none"
    embedding_dim: int = 16
    embedding_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed_classes", tuple(self.seed_classes))
        object.__setattr__(self, "relation_whitelist", tuple(self.relation_whitelist))
        if self.embedding not in EMBEDDING_SOURCES:
            raise ValueError(f"embedding must be one of {EMBEDDING_SOURCES}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        self.extraction()

    def extraction(self) -> ExtractionSpec:
        return ExtractionSpec(self.seed_classes, frozenset(self.relation_whitelist),
                              self.language, self.hops, self.max_nodes)


@dataclass(frozen=True)
class ModelSettings:
    hidden_dim: int = 64
    num_layers: int = 2
    lambda_edge: float = 1.0
    class_weight_clip: Tuple[float, float] = (0.1, 10.0)
    seed: int = 0
    # width of per-segment input embeddings (0 = geometry only)
    local_embedding_dim: int = 0
    context: bool = True

    def __post_init__(self):
        object.__setattr__(self, "class_weight_clip", tuple(self.class_weight_clip))
        if self.hidden_dim < 1 or self.num_layers < 0 or self.local_embedding_dim < 0:
            raise ValueError("hidden_dim >= 1, num_layers >= 0, local_embedding_dim >= 0 required")
        if self.lambda_edge < 0:
            raise ValueError("lambda_edge must be >= 0")
        if len(self.class_weight_clip) != 2 or not 0 < self.class_weight_clip[0] <= \
                self.class_weight_clip[1]:
            raise ValueError("class_weight_clip must be [lo, hi] with 0 < lo <= hi")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 200
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be >= 0")


@dataclass(frozen=True)
class Paths:
    kg_dump: Optional[str] = None
    embeddings: Optional[str] = None
    checkpoint: Optional[str] = None
    output_dir: Optional[str] = None


@dataclass(frozen=True)
class EngineConfig:
    resolution: float = DEFAULT_RESOLUTION
    min_points: int = DEFAULT_MIN_POINTS
    classes: Tuple[str, ...] = CLASSES
    construct: ConstructConfig = ConstructConfig()
    fusion: FusionConfig = FusionConfig()
    kg: KGSettings = KGSettings()
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    paths: Paths = Paths()

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")
        if len(self.classes) < 1 or len(set(self.classes)) != len(self.classes):
            raise ValueError("classes must be a non-empty list of distinct names")

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {
    "construct": ConstructConfig,
    "fusion": FusionConfig,
    "kg": KGSettings,
    "model": ModelSettings,
    "train": TrainSettings,
    "paths": Paths,
}


def default_config_dict() -> Dict[str, Any]:
    return EngineConfig().to_dict()


def _build_section(name: str, cls, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def config_from_dict(doc: Any) -> EngineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name for f in fields(EngineConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        else:
            kwargs[key] = value
    try:
        return EngineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``key=value`` or ``section.key=value`` strings to a config dict."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1:
            doc[parts[0]] = _parse_value(raw)
        elif len(parts) == 2:
            section = doc.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"{parts[0]!r} is not a section")
            section[parts[1]] = _parse_value(raw)
        else:
            raise ConfigError(f"override key {key!r} nests too deeply")
    return doc


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Iterable[str] = ()) -> EngineConfig:
    doc: Dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(apply_overrides(doc, overrides))

"""Seeded generator of tabletop scenes with ground truth.

A scene is a floor slab, a few supporters (tables, shelves) standing on it,
and small objects resting on the supporters, sometimes stacked on a box.
Every object is an axis-aligned box whose visible faces (everything but the
bottom) are point-sampled; each frame re-samples the points, adds Gaussian
noise and drops objects at random.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .frame_ingest import Frame
from .scene_model import (
    DEFAULT_RESOLUTION,
    Geometry,
    SceneGraph,
    assign_layers,
    bounds,
    voxelize,
)

CLASSES = ("floor", "table", "shelf", "box", "cup", "book", "bottle")
SUPPORTER_CLASSES = ("table", "shelf")
SMALL_CLASSES = ("box", "cup", "book", "bottle")
STACKABLE = ("cup", "bottle")

RELATIONS = ("supports", "contact", "next_to")

# (x, y, z) ranges in meters
DEFAULT_SIZES: Dict[str, Tuple[Tuple[float, float], ...]] = {
    "table": ((0.8, 1.4), (0.6, 0.9), (0.70, 0.78)),
    "shelf": ((0.6, 1.0), (0.35, 0.45), (0.95, 1.4)),
    "box": ((0.16, 0.32), (0.16, 0.30), (0.10, 0.28)),
    "cup": ((0.06, 0.10), (0.06, 0.10), (0.08, 0.16)),
    "book": ((0.15, 0.24), (0.20, 0.30), (0.03, 0.06)),
    "bottle": ((0.06, 0.09), (0.06, 0.09), (0.14, 0.30)),
}

FLOOR_HALF = 1.6
OBJECT_GAP = 0.12
SUPPORTER_GAP = 0.35
FLOOR_Z = 0.0
EDGE_MARGIN = 0.02
SEAM_MARGIN = 0.12


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_supporters: int = 2
    objects_per_supporter: Tuple[int, int] = (1, 3)
    sizes: Optional[Dict[str, Tuple[Tuple[float, float], ...]]] = None
    noise_sigma: float = 0.0
    frames: int = 1
    dropout: float = 0.0
    stack_probability: float = 0.3
    touching_tables_probability: float = 0.25
    point_density: float = 1200.0  # points per square meter of visible surface
    min_object_points: int = 40

    def __post_init__(self):
        lo, hi = self.objects_per_supporter
        if lo < 0 or hi < lo:
            raise InfeasibleSpec("objects_per_supporter must be a non-negative range")
        for name in ("dropout", "stack_probability", "touching_tables_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InfeasibleSpec(f"{name} must be in [0, 1]")
        if self.noise_sigma < 0 or self.frames < 1 or self.num_supporters < 0:
            raise InfeasibleSpec("noise_sigma >= 0, frames >= 1, num_supporters >= 0 required")
        for cls, rng in self.size_table.items():
            if any(not (0 < a <= b) for a, b in rng):
                raise InfeasibleSpec(f"size range for {cls} must be positive and ordered")
        smallest_sup = min(self.size_table[c][k][0] for c in SUPPORTER_CLASSES for k in (0, 1))
        for cls in SMALL_CLASSES:
            if max(self.size_table[cls][k][1] for k in (0, 1)) > smallest_sup - 0.02:
                raise InfeasibleSpec(f"{cls} objects can be larger than a supporter top")

    @property
    def size_table(self) -> Dict[str, Tuple[Tuple[float, float], ...]]:
        return self.sizes if self.sizes is not None else DEFAULT_SIZES


@dataclass
class SynthObject:
    index: int
    cls: str
    lo: np.ndarray
    hi: np.ndarray
    supporter: Optional[int]  # index of the supporting object, None for the floor

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2


@dataclass
class SceneSequence:
    spec: SceneSpec
    objects: List[SynthObject]
    frames: List[Frame]
    # per frame: segment id -> object index
    identity: List[Dict[int, int]]
    supports: List[Tuple[int, int]]
    contacts: List[Tuple[int, int]]
    next_to: List[Tuple[int, int]]
    gt_graph: SceneGraph = field(default=None)

    def visibility(self) -> Dict[int, int]:
        counts = {o.index: 0 for o in self.objects}
        for ident in self.identity:
            for obj in ident.values():
                counts[obj] += 1
        return counts


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _size(rng, spec: SceneSpec, cls: str) -> np.ndarray:
    return np.array([_uniform(rng, a, b) for a, b in spec.size_table[cls]])


def _overlaps(lo, hi, others, gap) -> bool:
    for olo, ohi in others:
        if lo[0] < ohi[0] + gap and olo[0] < hi[0] + gap and \
           lo[1] < ohi[1] + gap and olo[1] < hi[1] + gap:
            return True
    return False


def _layout(spec: SceneSpec, rng: np.random.Generator):
    objects: List[SynthObject] = []
    objects.append(SynthObject(0, "floor",
                               np.array([-FLOOR_HALF, -FLOOR_HALF, FLOOR_Z]),
                               np.array([FLOOR_HALF, FLOOR_HALF, FLOOR_Z]), None))
    contacts: List[Tuple[int, int]] = []
    placed: List[Tuple[np.ndarray, np.ndarray]] = []
    margin = 0.1
    for _ in range(spec.num_supporters):
        prev = objects[-1]
        if (prev.cls == "table" and rng.random() < spec.touching_tables_probability):
            # push a same-height table against the previous one
            size = _size(rng, spec, "table")
            size[2] = prev.hi[2] - prev.lo[2]
            size[1] = prev.hi[1] - prev.lo[1]
            lo = np.array([prev.hi[0], prev.lo[1], FLOOR_Z])
            hi = lo + size
            others = placed[:-1]
            if hi[0] <= FLOOR_HALF - margin and not _overlaps(lo, hi, others, SUPPORTER_GAP):
                objects.append(SynthObject(len(objects), "table", lo, hi, 0))
                contacts.append((prev.index, len(objects) - 1))
                placed.append((lo, hi))
                continue
        cls = SUPPORTER_CLASSES[int(rng.integers(len(SUPPORTER_CLASSES)))]
        size = _size(rng, spec, cls)
        for _attempt in range(100):
            x = _uniform(rng, -FLOOR_HALF + margin, FLOOR_HALF - margin - size[0])
            y = _uniform(rng, -FLOOR_HALF + margin, FLOOR_HALF - margin - size[1])
            lo = np.array([x, y, FLOOR_Z])
            hi = lo + size
            if not _overlaps(lo, hi, placed, SUPPORTER_GAP):
                objects.append(SynthObject(len(objects), cls, lo, hi, 0))
                placed.append((lo, hi))
                break

    supporters = [o for o in objects if o.cls in SUPPORTER_CLASSES]
    seamed = {i for pair in contacts for i in pair}
    next_to: List[Tuple[int, int]] = []
    for sup in supporters:
        lo_n, hi_n = spec.objects_per_supporter
        count = int(rng.integers(lo_n, hi_n + 1))
        on_top: List[int] = []
        footprints: List[Tuple[np.ndarray, np.ndarray]] = []
        for _ in range(count):
            cls = SMALL_CLASSES[int(rng.integers(len(SMALL_CLASSES)))]
            size = _size(rng, spec, cls)
            # keep clear of a neighbouring table's top by more than two cells
            mx = SEAM_MARGIN if sup.index in seamed else EDGE_MARGIN
            for _attempt in range(60):
                x = _uniform(rng, sup.lo[0] + mx, sup.hi[0] - mx - size[0])
                y = _uniform(rng, sup.lo[1] + EDGE_MARGIN, sup.hi[1] - EDGE_MARGIN - size[1])
                lo = np.array([x, y, sup.hi[2]])
                hi = lo + size
                if not _overlaps(lo, hi, footprints, OBJECT_GAP):
                    obj = SynthObject(len(objects), cls, lo, hi, sup.index)
                    objects.append(obj)
                    footprints.append((lo, hi))
                    on_top.append(obj.index)
                    break
        for a in range(len(on_top)):
            for b in range(a + 1, len(on_top)):
                next_to.append((on_top[a], on_top[b]))
        for idx in list(on_top):
            base = objects[idx]
            if base.cls != "box" or rng.random() >= spec.stack_probability:
                continue
            cls = STACKABLE[int(rng.integers(len(STACKABLE)))]
            size = _size(rng, spec, cls)
            room = base.hi[:2] - base.lo[:2] - size[:2]
            if np.any(room < 0.02):
                continue
            lo = np.array([base.lo[0] + _uniform(rng, 0.01, room[0] - 0.01),
                           base.lo[1] + _uniform(rng, 0.01, room[1] - 0.01), base.hi[2]])
            objects.append(SynthObject(len(objects), cls, lo, lo + size, base.index))
    supports = [(o.supporter, o.index) for o in objects if o.supporter is not None]
    return objects, supports, contacts, next_to


def _sample_box_surface(rng: np.random.Generator, obj: SynthObject, density: float,
                        min_points: int) -> np.ndarray:
    lo, hi = obj.lo, obj.hi
    ext = hi - lo
    if obj.cls == "floor":
        faces = [("z", hi[2], (0, 1))]
    else:
        faces = [("z", hi[2], (0, 1)),
                 ("x", lo[0], (1, 2)), ("x", hi[0], (1, 2)),
                 ("y", lo[1], (0, 2)), ("y", hi[1], (0, 2))]
    areas = np.array([ext[a] * ext[b] for _, _, (a, b) in faces])
    total = max(int(math.ceil(areas.sum() * density)), min_points)
    weights = areas / areas.sum()
    counts = rng.multinomial(total, weights)
    chunks = []
    axis_index = {"x": 0, "y": 1, "z": 2}
    for (axis, value, (a, b)), n in zip(faces, counts):
        if n == 0:
            continue
        pts = np.empty((n, 3))
        pts[:, a] = rng.uniform(lo[a], hi[a], n)
        pts[:, b] = rng.uniform(lo[b], hi[b], n)
        pts[:, axis_index[axis]] = value
        chunks.append(pts)
    return np.concatenate(chunks)


def _gt_graph(objects: Sequence[SynthObject], supports, contacts,
              resolution: float, rng: np.random.Generator, spec: SceneSpec) -> SceneGraph:
    g = SceneGraph()
    ground = g.add_node("virtual_ground")
    ids = {}
    for o in objects:
        pts = _sample_box_surface(rng, o, spec.point_density, spec.min_object_points)
        geom = Geometry(bounds(pts), voxelize(pts, resolution))
        ids[o.index] = g.add_node("global_object", geometry=geom, class_label=o.cls)
    for sup, obj in supports:
        g.add_edge(ids[sup], ids[obj], "supports")
    for a, b in contacts:
        g.add_edge(ids[a], ids[b], "contact")
    g.add_edge(ground, ids[0], "supports")
    assign_layers(g)
    return g


def generate(spec: SceneSpec, resolution: float = DEFAULT_RESOLUTION) -> SceneSequence:
    """Lay out a scene and render ``spec.frames`` segmented frames of it."""
    rng = np.random.default_rng(spec.seed)
    objects, supports, contacts, next_to = _layout(spec, rng)
    frames: List[Frame] = []
    identity: List[Dict[int, int]] = []
    for f in range(spec.frames):
        visible = [o for o in objects
                   if o.cls in ("floor",) + SUPPORTER_CLASSES or rng.random() >= spec.dropout]
        seg_ids = rng.permutation(len(visible))
        pts_list, seg_list = [], []
        ident: Dict[int, int] = {}
        for o, seg in zip(visible, seg_ids.tolist()):
            pts = _sample_box_surface(rng, o, spec.point_density, spec.min_object_points)
            if spec.noise_sigma > 0:
                pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
            pts_list.append(pts)
            seg_list.append(np.full(len(pts), seg, dtype=np.int64))
            ident[seg] = o.index
        points = np.concatenate(pts_list) if pts_list else np.zeros((0, 3))
        segs = np.concatenate(seg_list) if seg_list else np.zeros(0, dtype=np.int64)
        inv = {obj: seg for seg, obj in ident.items()}
        gt_class = {seg: objects[obj].cls for seg, obj in ident.items()}
        rels = []
        for kind, pairs in (("supports", supports), ("contact", contacts), ("next_to", next_to)):
            for a, b in pairs:
                if a in inv and b in inv:
                    rels.append((inv[a], inv[b], kind))
        rels.sort()
        frames.append(Frame(f, points, segs, gt_class, rels))
        identity.append(ident)
    seq = SceneSequence(spec, objects, frames, identity, supports, contacts, next_to)
    seq.gt_graph = _gt_graph(objects, supports, contacts, resolution,
                             np.random.default_rng([spec.seed, 1]), spec)
    return seq


def corrupt(frame: Frame, label_noise_rate: float, seed: int = 0,
            classes: Sequence[str] = CLASSES) -> Frame:
    """Copy of ``frame`` with ``round(rate * labeled segments)`` labels flipped.

    Each flipped label is replaced by a uniformly drawn different class.
    Rounding is half-up.
    """
    if not 0.0 <= label_noise_rate <= 1.0:
        raise ValueError("label_noise_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    segs = sorted(frame.gt_class)
    n_flip = int(math.floor(label_noise_rate * len(segs) + 0.5))
    chosen = rng.choice(len(segs), size=n_flip, replace=False) if n_flip else []
    gt = dict(frame.gt_class)
    for i in sorted(int(c) for c in chosen):
        seg = segs[i]
        others = [c for c in classes if c != gt[seg]]
        gt[seg] = others[int(rng.integers(len(others)))]
    return Frame(frame.frame_id, frame.points.copy(), frame.segment_ids.copy(), gt,
                 list(frame.gt_relations))

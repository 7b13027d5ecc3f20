"""Frame files, per-segment splitting and handcrafted geometric descriptors."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .scene_model import (
    AABB,
    DEFAULT_RESOLUTION,
    GeometryError,
    SparseVoxelGrid,
    as_points,
    bounds,
    voxelize,
)

logger = logging.getLogger(__name__)

D_GEO = 11
DEFAULT_MIN_POINTS = 10

DESCRIPTOR_NAMES = (
    "centroid_z",
    "extent_x",
    "extent_y",
    "extent_z",
    "box_volume",
    "log_point_count",
    "eig1",
    "eig2_over_eig1",
    "eig3_over_eig1",
    "mean_height_above_bottom",
    "footprint_area",
)

PathLike = Union[str, Path]


class FrameFormatError(ValueError):
    """A frame or embedding file does not follow the expected layout."""


@dataclass
class Frame:
    frame_id: int
    points: np.ndarray
    segment_ids: np.ndarray
    gt_class: Dict[int, str] = field(default_factory=dict)
    gt_relations: List[Tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.points = as_points(self.points)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.segment_ids):
            raise FrameFormatError(
                f"{len(self.points)} points but {len(self.segment_ids)} segment ids")
        if np.any(self.segment_ids < 0):
            raise FrameFormatError("segment ids must be non-negative")
        present = set(self.segment_ids.tolist())
        for seg in self.gt_class:
            if seg not in present:
                raise FrameFormatError(f"GT_CLASS references unknown segment {seg}")
        for src, dst, _ in self.gt_relations:
            if src not in present or dst not in present:
                raise FrameFormatError(f"GT_REL references unknown segment {src} or {dst}")

    @property
    def segments(self) -> List[int]:
        return sorted(set(self.segment_ids.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.segment_ids, other.segment_ids)
            and self.gt_class == other.gt_class
            and list(self.gt_relations) == list(other.gt_relations)
        )


@dataclass
class SegmentObservation:
    segment_id: int
    points: np.ndarray
    grid: SparseVoxelGrid
    box: AABB
    descriptor: np.ndarray
    gt_class: Optional[str] = None

    @property
    def centroid_z(self) -> float:
        return float(self.descriptor[0])


def _check_token(label: str) -> str:
    if not label or any(c.isspace() for c in label):
        raise FrameFormatError(f"labels must be non-empty single tokens, got {label!r}")
    return label


def format_frame(frame: Frame) -> str:
    lines = [f"FRAME {frame.frame_id} {len(frame.points)} {len(frame.segments)}"]
    for (x, y, z), seg in zip(frame.points.tolist(), frame.segment_ids.tolist()):
        lines.append(f"{x!r} {y!r} {z!r} {seg}")
    for seg in sorted(frame.gt_class):
        lines.append(f"GT_CLASS {seg} {_check_token(frame.gt_class[seg])}")
    for src, dst, rel in frame.gt_relations:
        lines.append(f"GT_REL {src} {dst} {_check_token(rel)}")
    return "\n".join(lines) + "\n"


def write_frame(frame: Frame, path: PathLike) -> None:
    Path(path).write_text(format_frame(frame))


def _parse_int(tok: str, what: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise FrameFormatError(f"line {lineno}: {what} is not an integer: {tok!r}") from None


def parse_frame(text: str) -> Frame:
    lines = text.splitlines()
    if not lines:
        raise FrameFormatError("empty frame file")
    header = lines[0].split(" ")
    if len(header) != 4 or header[0] != "FRAME":
        raise FrameFormatError(f"malformed header: {lines[0]!r}")
    frame_id = _parse_int(header[1], "frame id", 1)
    count = _parse_int(header[2], "point count", 1)
    seg_count = _parse_int(header[3], "segment count", 1)
    if count < 0 or seg_count < 0:
        raise FrameFormatError("negative counts in header")

    body = lines[1:]
    n_points = 0
    for line in body:
        if line.startswith("GT_"):
            break
        n_points += 1
    if n_points != count:
        raise FrameFormatError(f"header declares {count} points, found {n_points}")

    points = np.empty((count, 3), dtype=np.float64)
    segs = np.empty(count, dtype=np.int64)
    for i, line in enumerate(body[:count]):
        parts = line.split(" ")
        if len(parts) != 4:
            raise FrameFormatError(f"line {i + 2}: expected 4 fields, got {len(parts)}")
        try:
            points[i] = (float(parts[0]), float(parts[1]), float(parts[2]))
        except ValueError:
            raise FrameFormatError(f"line {i + 2}: non-numeric coordinate in {line!r}") from None
        segs[i] = _parse_int(parts[3], "segment id", i + 2)
    if not np.all(np.isfinite(points)):
        raise FrameFormatError("non-finite coordinate")

    gt_class: Dict[int, str] = {}
    gt_rel: List[Tuple[int, int, str]] = []
    for j, line in enumerate(body[count:], start=count + 2):
        if not line.strip():
            continue
        parts = line.split(" ")
        if parts[0] == "GT_CLASS" and len(parts) == 3:
            gt_class[_parse_int(parts[1], "segment id", j)] = parts[2]
        elif parts[0] == "GT_REL" and len(parts) == 4:
            gt_rel.append((_parse_int(parts[1], "segment id", j),
                           _parse_int(parts[2], "segment id", j), parts[3]))
        else:
            raise FrameFormatError(f"line {j}: unrecognized trailer {line!r}")

    distinct = len(set(segs.tolist()))
    if distinct != seg_count:
        raise FrameFormatError(f"header declares {seg_count} segments, found {distinct}")
    return Frame(frame_id, points, segs, gt_class, gt_rel)


def load_frame(path: PathLike) -> Frame:
    return parse_frame(Path(path).read_text())


def _sym3_eigenvalues(cov: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(cov)[::-1]
    return np.clip(w, 0.0, None)


def geometric_descriptor(points) -> np.ndarray:
    """Fixed-length handcrafted shape descriptor of one segment.

    Components, in order, are listed in ``DESCRIPTOR_NAMES``. Eigenvalues are
    those of the population covariance, sorted descending; negative round-off
    is clipped to zero and any ratio with a zero leading eigenvalue is 0.
    """
    pts = as_points(points)
    n = len(pts)
    if n == 0:
        raise GeometryError("descriptor of an empty point set")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    ext = hi - lo
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / n
    lam = _sym3_eigenvalues(cov)
    l1 = float(lam[0])
    r2 = float(lam[1]) / l1 if l1 > 0 else 0.0
    r3 = float(lam[2]) / l1 if l1 > 0 else 0.0
    return np.array([
        centroid[2],
        ext[0],
        ext[1],
        ext[2],
        ext[0] * ext[1] * ext[2],
        math.log1p(n),
        l1,
        r2,
        r3,
        centroid[2] - lo[2],
        ext[0] * ext[1],
    ], dtype=np.float64)


def split_segments(
    frame: Frame,
    voxel_resolution: float = DEFAULT_RESOLUTION,
    min_points: int = DEFAULT_MIN_POINTS,
) -> Tuple[List[SegmentObservation], Dict[int, int]]:
    """Group a frame's points by segment id.

    Returns ``(observations, dropped)`` where ``dropped`` maps the id of each
    segment with fewer than ``min_points`` points to its point count.
    Observations come out in ascending segment id order.
    """
    if len(frame.segment_ids) == 0:
        return [], {}
    order = np.argsort(frame.segment_ids, kind="stable")
    segs_sorted = frame.segment_ids[order]
    uniq, starts = np.unique(segs_sorted, return_index=True)
    ends = np.append(starts[1:], len(order))
    observations: List[SegmentObservation] = []
    dropped: Dict[int, int] = {}
    for seg, a, b in zip(uniq.tolist(), starts.tolist(), ends.tolist()):
        if b - a < min_points:
            dropped[seg] = b - a
            continue
        pts = frame.points[np.sort(order[a:b])]
        observations.append(SegmentObservation(
            segment_id=seg,
            points=pts,
            grid=voxelize(pts, voxel_resolution),
            box=bounds(pts),
            descriptor=geometric_descriptor(pts),
            gt_class=frame.gt_class.get(seg),
        ))
    if dropped:
        logger.info("frame %d: dropped %d segment(s) below %d points: %s",
                    frame.frame_id, len(dropped), min_points, sorted(dropped))
    return observations, dropped


def _parse_vector_row(parts: List[str], lineno: int) -> np.ndarray:
    try:
        vec = np.array([float(v) for v in parts], dtype=np.float64)
    except ValueError:
        raise FrameFormatError(f"line {lineno}: non-numeric vector component") from None
    if not np.all(np.isfinite(vec)):
        raise FrameFormatError(f"line {lineno}: non-finite vector component")
    return vec


def load_external_embeddings(path: PathLike, id_space: str = "segment") -> Dict[object, np.ndarray]:
    """Read an ``EMB <count> <dim>`` table.

    ``id_space="segment"`` parses keys as integer segment ids; ``"class"``
    keeps them as strings.
    """
    if id_space not in ("segment", "class"):
        raise ValueError(f"id_space must be 'segment' or 'class', got {id_space!r}")
    out: Dict[object, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            return out
        parts = header.split()
        if len(parts) != 3 or parts[0] != "EMB":
            raise FrameFormatError(f"malformed embedding header: {header.strip()!r}")
        count = _parse_int(parts[1], "row count", 1)
        dim = _parse_int(parts[2], "dimension", 1)
        rows = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            key: object = parts[0]
            if id_space == "segment":
                key = _parse_int(parts[0], "segment id", lineno)
            vec = _parse_vector_row(parts[1:], lineno)
            if len(vec) != dim:
                raise FrameFormatError(
                    f"line {lineno}: dimension {len(vec)} does not match declared {dim}")
            if key in out:
                raise FrameFormatError(f"line {lineno}: duplicate key {key!r}")
            out[key] = vec
            rows += 1
    if rows != count:
        raise FrameFormatError(f"header declares {count} rows, found {rows}")
    return out


def write_embeddings(table: Dict[object, np.ndarray], path: PathLike) -> None:
    dims = {len(v) for v in table.values()}
    if len(dims) > 1:
        raise FrameFormatError(f"inconsistent dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    lines = [f"EMB {len(table)} {dim}"]
    for key in sorted(table, key=str):
        lines.append(" ".join([str(key)] + [repr(float(v)) for v in table[key]]))
    Path(path).write_text("\n".join(lines) + "\n")

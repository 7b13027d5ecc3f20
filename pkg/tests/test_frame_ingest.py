from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import box_points
from oracles import cardano_eigenvalues, population_covariance
from sgprior.frame_ingest import (
    D_GEO,
    Frame,
    FrameFormatError,
    format_frame,
    geometric_descriptor,
    load_external_embeddings,
    load_frame,
    parse_frame,
    split_segments,
    write_embeddings,
    write_frame,
)
from sgprior.scene_model import GeometryError
from sgprior.synth import SceneSpec, generate


def test_empty_frame_file(tmp_path):
    p = tmp_path / "f.frame"
    p.write_text("FRAME 3 0 0\n")
    f = load_frame(p)
    assert f.frame_id == 3 and len(f.points) == 0 and f.gt_class == {}


def test_count_mismatch_rejected():
    with pytest.raises(FrameFormatError):
        parse_frame("FRAME 0 2 1\n0.0 0.0 0.0 0\n")
    with pytest.raises(FrameFormatError):
        parse_frame("FRAME 0 1 1\n0.0 abc 0.0 0\n")
    with pytest.raises(FrameFormatError):
        parse_frame("FRAMEX 0 1 1\n0.0 0.0 0.0 0\n")
    with pytest.raises(FrameFormatError):
        parse_frame("FRAME 0 1 2\n0.0 0.0 0.0 0\n")


def test_frame_invariants():
    with pytest.raises(FrameFormatError):
        Frame(0, np.zeros((2, 3)), [0])
    with pytest.raises(FrameFormatError):
        Frame(0, np.zeros((1, 3)), [0], {5: "cup"})
    with pytest.raises(FrameFormatError):
        Frame(0, np.zeros((1, 3)), [0], {}, [(0, 4, "supports")])


def test_round_trip_synthetic(tmp_path):
    frame = generate(SceneSpec(seed=5, num_supporters=1, objects_per_supporter=(2, 2))).frames[0]
    assert len(frame.segments) == 4
    write_frame(frame, tmp_path / "a.frame")
    again = load_frame(tmp_path / "a.frame")
    assert again == frame
    assert format_frame(again) == format_frame(frame)


def test_split_examples():
    pts = np.random.default_rng(0).normal(size=(105, 3))
    segs = np.array([0] * 100 + [1] * 5)
    obs, dropped = split_segments(Frame(0, pts, segs))
    assert [o.segment_id for o in obs] == [0]
    assert dropped == {1: 5}
    obs, dropped = split_segments(Frame(0, pts[100:], segs[100:]), min_points=10)
    assert obs == [] and dropped == {1: 5}


def test_split_matches_group_by():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(400, 3))
    segs = rng.permutation(np.repeat([3, 7, 11, 20], 100))
    obs, dropped = split_segments(Frame(0, pts, segs))
    groups = {}
    for p, s in zip(pts.tolist(), segs.tolist()):
        groups.setdefault(s, []).append(p)
    assert dropped == {}
    assert [o.segment_id for o in obs] == sorted(groups)
    for o in obs:
        assert np.array_equal(o.points, np.array(groups[o.segment_id]))


@given(st.lists(st.integers(0, 6), min_size=1, max_size=200), st.integers(1, 30))
def test_split_is_partition(segs, min_points):
    pts = np.arange(len(segs) * 3, dtype=float).reshape(-1, 3)
    obs, dropped = split_segments(Frame(0, pts, segs), min_points=min_points)
    assert sum(len(o.points) for o in obs) + sum(dropped.values()) == len(segs)


def test_descriptor_single_point():
    d = geometric_descriptor([[1.0, 2.0, 3.0]])
    assert d.shape == (D_GEO,)
    assert np.all(d[1:5] == 0) and d[6] == 0 and d[7] == 0 and d[8] == 0
    assert d[0] == 3.0 and d[5] == pytest.approx(math.log(2))


def test_descriptor_box():
    pts = box_points((0, 0, 0), (1, 2, 3), 5000, seed=2)
    d = geometric_descriptor(pts)
    assert d[1:4] == pytest.approx([1, 2, 3], abs=0.02)
    assert d[4] == pytest.approx(6, rel=0.03)
    assert d[10] == pytest.approx(2, rel=0.03)
    with pytest.raises(GeometryError):
        geometric_descriptor(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_descriptor_eigenvalues_match_cardano(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(50, 3)) @ rng.normal(size=(3, 3))
    d = geometric_descriptor(pts)
    lam = cardano_eigenvalues(population_covariance(pts))
    assert d[6] == pytest.approx(lam[0], abs=1e-8)
    assert d[7] * d[6] == pytest.approx(lam[1], abs=1e-8)
    assert d[8] * d[6] == pytest.approx(lam[2], abs=1e-8)


coords = st.floats(-3, 3, allow_nan=False)
clouds = st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=40).map(np.array)


@given(clouds, st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.randoms())
def test_descriptor_invariances(pts, dx, dy, dz, rnd):
    d = geometric_descriptor(pts)
    assert np.all(np.isfinite(d))
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    assert np.allclose(geometric_descriptor(pts[perm]), d, atol=1e-9)
    shifted = geometric_descriptor(pts + [dx, dy, 0.0])
    assert np.allclose(shifted, d, atol=1e-7)
    z = geometric_descriptor(pts + [0.0, 0.0, dz])
    # centroid_z shifts with the segment; height above the box bottom does not
    assert z[0] == pytest.approx(d[0] + dz, abs=1e-7)
    assert np.allclose(z[1:], d[1:], atol=1e-7)


def test_embeddings_table(tmp_path):
    p = tmp_path / "e.emb"
    p.write_text("")
    assert load_external_embeddings(p) == {}
    p.write_text("EMB 2 4\n0 1 2 3 4\n1 1 2 3 4 5\n")
    with pytest.raises(FrameFormatError):
        load_external_embeddings(p)
    p.write_text("EMB 2 2\n0 1 2\n0 1 2\n")
    with pytest.raises(FrameFormatError):
        load_external_embeddings(p)
    p.write_text("EMB 3 2\n0 1 2\n")
    with pytest.raises(FrameFormatError):
        load_external_embeddings(p)


def test_embeddings_match_line_parse(tmp_path):
    rng = np.random.default_rng(3)
    table = {i: rng.normal(size=6) for i in range(100)}
    p = tmp_path / "e.emb"
    write_embeddings(table, p)
    oracle = {}
    for line in p.read_text().splitlines()[1:]:
        tok = line.split(" ")
        oracle[int(tok[0])] = [float(t) for t in tok[1:]]
    got = load_external_embeddings(p)
    assert got.keys() == oracle.keys()
    for k in oracle:
        assert got[k].tolist() == oracle[k] == table[k].tolist()
    classes = load_external_embeddings(p, "class")
    assert set(classes) == {str(i) for i in range(100)}

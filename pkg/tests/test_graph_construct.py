from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import Obs, box_points, local_from_frame
from oracles import brute_force_pairs, chebyshev_pairs_exist, longest_path_levels
from sgprior.frame_ingest import split_segments
from sgprior.graph_construct import (
    A_SUPPORTS_B,
    B_SUPPORTS_A,
    CONTACT_ONLY,
    NONE,
    ConstructConfig,
    build_local_graph,
    detect_contact,
    infer_support,
    propose_edges,
)
from sgprior.scene_model import SparseVoxelGrid, supports_levels
from sgprior.synth import SceneSpec, generate


class CenterObs:
    def __init__(self, sid, center):
        from sgprior.scene_model import AABB

        self.segment_id = sid
        c = tuple(float(v) for v in center)
        self.box = AABB(c, c)


def test_pair_at_04_and_06():
    cfg = ConstructConfig()
    assert cfg.edge_distance_threshold == 0.5
    assert propose_edges([CenterObs(0, (0, 0, 0)), CenterObs(1, (0.4, 0, 0))], cfg) == [(0, 1)]
    assert propose_edges([CenterObs(0, (0, 0, 0)), CenterObs(1, (0.6, 0, 0))], cfg) == []
    assert propose_edges([CenterObs(0, (0, 0, 0))], cfg) == []


def test_propose_matches_brute_force():
    rng = np.random.default_rng(0)
    centers = rng.uniform(0, 3, size=(200, 3))
    ids = list(rng.permutation(1000)[:200])
    obs = [CenterObs(int(i), c) for i, c in zip(ids, centers)]
    got = propose_edges(obs)
    assert got == brute_force_pairs([o.segment_id for o in obs],
                                    np.array([o.box.center for o in obs]), 0.5)


@given(st.lists(st.tuples(*[st.floats(0, 2, allow_nan=False)] * 3), max_size=30),
       st.floats(0, 1), st.floats(0, 1))
def test_propose_monotone_in_threshold(centers, t1, t2):
    lo, hi = sorted((t1, t2))
    obs = [CenterObs(i, c) for i, c in enumerate(centers)]
    small = set(propose_edges(obs, ConstructConfig(edge_distance_threshold=lo)))
    big = set(propose_edges(obs, ConstructConfig(edge_distance_threshold=hi)))
    assert small <= big
    for a, b in big:
        assert a < b
        assert np.linalg.norm(obs[a].box.center - obs[b].box.center) <= hi


def test_contact_examples():
    a = Obs(0, box_points((0, 0, 0), (0.3, 0.3, 0.3), 500))
    assert detect_contact(a, a)
    far = Obs(1, box_points((0.8, 0, 0), (1.1, 0.3, 0.3), 500))
    assert not detect_contact(a, far)


def test_contact_matches_cell_scan():
    rng = np.random.default_rng(1)
    for k in range(20):
        h = rng.uniform(0.1, 0.3)
        gap = rng.choice([0.0, 0.02, 0.06, 0.12])
        lower = Obs(0, box_points((0, 0, 0), (0.3, 0.3, h), 400, seed=k))
        upper = Obs(1, box_points((0.05, 0.05, h + gap), (0.2, 0.2, h + gap + 0.1), 300, seed=k + 50))
        assert detect_contact(lower, upper) == chebyshev_pairs_exist(
            lower.grid.cells, upper.grid.cells, 1)


def test_support_examples():
    table = Obs(0, box_points((-0.5, -0.4, 0.0), (0.5, 0.4, 0.75), 3000))
    cup = Obs(1, box_points((-0.05, -0.05, 0.75), (0.05, 0.05, 0.87), 400, seed=1))
    assert infer_support(table, cup) == A_SUPPORTS_B
    assert infer_support(cup, table) == B_SUPPORTS_A
    left = Obs(0, box_points((0, 0, 0), (0.2, 0.2, 0.2), 600))
    right = Obs(1, box_points((0.2, 0, 0), (0.4, 0.2, 0.2), 600, seed=3))
    assert infer_support(left, right) == CONTACT_ONLY
    far = Obs(2, box_points((2, 2, 0), (2.2, 2.2, 0.2), 600))
    assert infer_support(left, far) == NONE


def test_support_needs_footprint_overlap():
    # the upper box overhangs: only a sliver of its footprint sits over the lower one
    lower = Obs(0, box_points((0, 0, 0), (0.3, 0.3, 0.3), 1500))
    upper = Obs(1, box_points((0.28, 0, 0.3), (0.68, 0.3, 0.5), 1500, seed=4))
    assert infer_support(lower, upper) == CONTACT_ONLY


def test_stack_layers(stack_frame):
    g = local_from_frame(stack_frame)
    g.check_invariants()
    by_seg = {n.segment_id: n for n in g.nodes_of_type("local_object")}
    ground = g.nodes_of_type("virtual_ground")[0]
    floor, table, cup = by_seg[0], by_seg[1], by_seg[2]
    assert ground.layer == 0
    assert (floor.layer, table.layer, cup.layer) == (1, 2, 3)
    assert g.find_edge(ground.id, floor.id, "supports")
    assert g.find_edge(floor.id, table.id, "supports")
    assert g.find_edge(table.id, cup.id, "supports")
    assert g.find_edge(table.id, cup.id, "proximal")  # box centers 0.435 m apart
    assert g.find_edge(floor.id, table.id, "proximal")
    assert g.find_edge(floor.id, cup.id, "proximal") is None  # 0.81 m apart


def test_stack_without_floor_segment():
    from conftest import frame_from_boxes

    frame = frame_from_boxes([
        ((-0.5, -0.4, 0.0), (0.5, 0.4, 0.75), "all"),
        ((-0.05, -0.05, 0.75), (0.05, 0.05, 0.87), "all"),
    ])
    g = local_from_frame(frame)
    by_seg = {n.segment_id: n for n in g.nodes_of_type("local_object")}
    ground = g.nodes_of_type("virtual_ground")[0]
    assert (ground.layer, by_seg[0].layer, by_seg[1].layer) == (0, 1, 2)
    assert g.find_edge(ground.id, by_seg[0].id, "supports")
    assert g.find_edge(by_seg[0].id, by_seg[1].id, "supports")
    assert not g.in_edges(by_seg[1].id, "supports")[0].src == ground.id


def test_empty_observations():
    g = build_local_graph([])
    assert [n.node_type for n in g.nodes.values()] == ["virtual_ground"]


@pytest.mark.parametrize("seed", range(30))
def test_levels_and_supports_on_synthetic(seed):
    seq = generate(SceneSpec(seed=seed))
    frame = seq.frames[0]
    obs, _ = split_segments(frame)
    g = build_local_graph(obs)
    g.check_invariants()
    seg_of = {n.id: n.segment_id for n in g.nodes_of_type("local_object")}
    inferred = {(seg_of[e.src], seg_of[e.dst]) for e in g.edges_of_type("supports")
                if e.src in seg_of}
    gt = {(a, b) for a, b, r in frame.gt_relations if r == "supports"}
    assert gt <= inferred
    assert not {(b, a) for a, b in gt} & inferred
    # layers follow 1 + max(supporter layer) with ground at 0
    levels = longest_path_levels(g.nodes, [(e.src, e.dst) for e in g.edges_of_type("supports")])
    assert {n: g.nodes[n].layer for n in g.nodes} == levels == supports_levels(g)
    for e in g.edges_of_type("supports"):
        if e.src in seg_of:
            assert g.nodes[e.src].descriptor[0] <= g.nodes[e.dst].descriptor[0]


@given(st.integers(0, 10_000))
def test_supporter_never_higher(seed):
    rng = np.random.default_rng(seed)
    lo_a = rng.uniform(0, 0.3, 3)
    lo_b = lo_a + rng.uniform(-0.2, 0.2, 3)
    a = Obs(0, box_points(lo_a, lo_a + rng.uniform(0.05, 0.3, 3), 300, seed=seed))
    b = Obs(1, box_points(lo_b, lo_b + rng.uniform(0.05, 0.3, 3), 300, seed=seed + 1))
    v = infer_support(a, b)
    if v == A_SUPPORTS_B:
        assert a.centroid_z <= b.centroid_z
    elif v == B_SUPPORTS_A:
        assert b.centroid_z <= a.centroid_z


def test_config_validation():
    with pytest.raises(ValueError):
        ConstructConfig(edge_distance_threshold=-1)
    with pytest.raises(ValueError):
        ConstructConfig(contact_tolerance=1.5)
    with pytest.raises(ValueError):
        ConstructConfig(support_footprint_overlap=2)

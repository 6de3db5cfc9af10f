"""Graph validation with box geometry, and ground-truth subgraph matching."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from builders import make_graph, random_annotated_instance
from oracles import enumerate_embeddings, iou_ref
from rcrn.errors import CycleError, DegenerateBox, DisconnectedError, MultiRootError
from rcrn.graphs import (
    AnnotatedSceneGraph,
    CorrespondenceLabel,
    EntityPhrase,
    GTNode,
    GTRelation,
    LanguageSceneGraph,
    MatchStatus,
    RelationPhrase,
    VisualScene,
    iou,
    location_vector,
    match_subgraph,
    relative_spatial,
    serialize,
    validate_tree,
)


@st.composite
def boxes(draw, min_size=0.01):
    w = draw(st.floats(min_size, 1.0))
    h = draw(st.floats(min_size, 1.0))
    x = draw(st.floats(0.0, 1.0 - w))
    y = draw(st.floats(0.0, 1.0 - h))
    return (x, y, w, h)


# ---------------------------------------------------------------------------
# validate_tree


@pytest.mark.example
def test_chain_is_a_tree():
    validate_tree(make_graph(3, [(0, 1), (1, 2)]))


@pytest.mark.example
def test_parallel_edges_are_a_cycle():
    with pytest.raises(CycleError):
        validate_tree(make_graph(2, [(0, 1), (0, 1)]))


@pytest.mark.example
def test_edgeless_pair_is_disconnected():
    with pytest.raises(DisconnectedError):
        validate_tree(make_graph(2, []))


def test_child_pointing_at_root_is_rejected():
    with pytest.raises(MultiRootError):
        validate_tree(make_graph(2, [(1, 0)]))


@pytest.mark.example
def test_single_node_is_a_tree():
    validate_tree(make_graph(1, []))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), max_size=7))
def test_validate_tree_accepts_iff_connected_with_n_minus_one_edges(n, raw_edges):
    edges = [(a % n, b % n) for a, b in raw_edges]
    g = make_graph(n, edges)
    # reference: connected undirected graph with n-1 edges and every edge oriented away from the root
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {0}, [0]
    while stack:
        for m in adj[stack.pop()] - seen:
            seen.add(m)
            stack.append(m)
    depth = {0: 0}
    frontier = [0]
    while frontier:
        nxt = []
        for a in frontier:
            for m in adj[a]:
                if m not in depth:
                    depth[m] = depth[a] + 1
                    nxt.append(m)
        frontier = nxt
    is_tree = len(edges) == n - 1 and len(seen) == n and all(a != b for a, b in edges)
    oriented = is_tree and all(depth[a] < depth[b] for a, b in edges)
    try:
        validate_tree(g)
        ok = True
    except (CycleError, DisconnectedError, MultiRootError):
        ok = False
    assert ok == oriented


# ---------------------------------------------------------------------------
# geometry


@pytest.mark.example
def test_iou_identical_disjoint_and_partial_overlap():
    assert iou((0.1, 0.1, 0.3, 0.3), (0.1, 0.1, 0.3, 0.3)) == 1.0
    assert iou((0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2)) == 0.0
    # intersection 0.01, union 0.07
    assert_allclose(iou((0, 0, 0.2, 0.2), (0.1, 0.1, 0.2, 0.2)), 1 / 7, rtol=1e-12)


def test_iou_zero_area_union():
    assert iou((0.5, 0.5, 0.0, 0.0), (0.5, 0.5, 0.0, 0.0)) == 0.0


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_symmetric_bounded_and_matches_reference(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert_allclose(v, min(1.0, iou_ref(a, b)), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(boxes())
def test_iou_self_is_one(b):
    assert_allclose(iou(b, b), 1.0, rtol=1e-12)


@pytest.mark.example
def test_relative_spatial_examples():
    assert_allclose(relative_spatial((0, 0, 1, 1), (0, 0, 1, 1)), [-0.5, -0.5, 0.5, 0.5, 1.0])
    assert_allclose(relative_spatial((0, 0, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5)), [0.5, 0.5, 1.5, 1.5, 1.0])


def test_relative_spatial_degenerate_reference_box():
    with pytest.raises(DegenerateBox):
        relative_spatial((0.1, 0.1, 0.0, 0.2), (0.2, 0.2, 0.1, 0.1))


@pytest.mark.example
@settings(max_examples=200, deadline=None)
@given(boxes(), boxes())
def test_relative_spatial_self_pair_and_area_ratio(a, b):
    assert_allclose(relative_spatial(a, a), [-0.5, -0.5, 0.5, 0.5, 1.0], atol=1e-9)
    assert_allclose(relative_spatial(a, b)[4], (b[2] * b[3]) / (a[2] * a[3]), rtol=1e-12)


@pytest.mark.example
def test_location_vector_examples():
    assert_allclose(location_vector((0, 0, 1, 1)), [0, 0, 1, 1, 1])
    assert_allclose(location_vector((0.25, 0.25, 0.5, 0.5)), [0.25, 0.25, 0.5, 0.5, 0.25])


@pytest.mark.example
@settings(max_examples=100, deadline=None)
@given(boxes())
def test_location_vector_area_component(b):
    v = location_vector(b)
    assert v[4] == v[2] * v[3]


# ---------------------------------------------------------------------------
# serialisation


def test_serialize_fills_spans_in_preorder():
    ents = (EntityPhrase(0, ("red", "cube")), EntityPhrase(1, ("ball",)), EntityPhrase(2, ("cone",)))
    rels = (RelationPhrase(0, 0, 1, ("left", "of")), RelationPhrase(1, 1, 2, ("near",)))
    tokens, g = serialize(LanguageSceneGraph(ents, rels, 0))
    assert tokens == ["red", "cube", "left", "of", "ball", "near", "cone"]
    assert g.entity(0).span == (0, 2) and g.entity(1).span == (4, 5) and g.entity(2).span == (6, 7)
    assert g.relation(0).span == (2, 4) and g.relation(1).span == (5, 6)


def test_graph_and_scene_json_round_trip(rng):
    from builders import random_scene

    g = make_graph(3, [(0, 1), (0, 2)], {0: ("red",), 1: ("cube", "small")})
    assert LanguageSceneGraph.from_dict(json.loads(json.dumps(g.to_dict()))) == g
    scene = random_scene(rng, 4)
    back = VisualScene.from_dict(json.loads(json.dumps(scene.to_dict())))
    assert_allclose(back.boxes(), scene.boxes())
    assert_allclose(back.feats(), scene.feats())


# ---------------------------------------------------------------------------
# match_subgraph


def _gt(nodes, rels):
    return AnnotatedSceneGraph(tuple(GTNode(i, b, frozenset(w)) for i, b, w in nodes),
                               tuple(GTRelation(s, o, tuple(w)) for s, o, w in rels))


def _query(words, edges):
    ents = tuple(EntityPhrase(i, tuple(w)) for i, w in enumerate(words))
    rels = tuple(RelationPhrase(k, s, o, tuple(w)) for k, (s, o, w) in enumerate(edges))
    return LanguageSceneGraph(ents, rels, 0)


def test_unique_embedding_in_five_node_graph():
    boxes_ = [(0.1 * i, 0.1, 0.08, 0.08) for i in range(5)]
    gt = _gt([(0, boxes_[0], ["man"]), (1, boxes_[1], ["hat"]), (2, boxes_[2], ["dog"]),
              (3, boxes_[3], ["hat"]), (4, boxes_[4], ["tree"])],
             [(0, 1, ["wearing"]), (0, 2, ["near"]), (2, 3, ["wearing"]), (4, 0, ["behind"])])
    q = _query([["man"], ["hat"]], [(0, 1, ["wearing"])])
    res = match_subgraph(q, gt, boxes_[0])
    assert isinstance(res, CorrespondenceLabel) and res.unique
    oracle = enumerate_embeddings(q, gt, boxes_[0])
    assert len(oracle) == 1 and res.entity_map == oracle[0]
    assert res.relation_map == {0: (0, 1)}


@pytest.mark.example
def test_absent_phrase_is_not_found():
    gt = _gt([(0, (0, 0, 0.2, 0.2), ["man"]), (1, (0.5, 0, 0.2, 0.2), ["hat"])], [(0, 1, ["wearing"])])
    q = _query([["man"], ["umbrella"]], [(0, 1, ["wearing"])])
    assert match_subgraph(q, gt, (0, 0, 0.2, 0.2)) is MatchStatus.NOT_FOUND


def test_mirrored_pattern_is_ambiguous():
    root = (0.4, 0.4, 0.2, 0.2)
    gt = _gt([(0, root, ["man"]), (1, (0.0, 0.4, 0.2, 0.2), ["dog"]), (2, (0.8, 0.4, 0.2, 0.2), ["dog"])],
             [(0, 1, ["near"]), (0, 2, ["near"])])
    q = _query([["man"], ["dog"]], [(0, 1, ["near"])])
    assert len(enumerate_embeddings(q, gt, root)) == 2
    assert match_subgraph(q, gt, root) is MatchStatus.AMBIGUOUS


def test_referent_box_equality_tolerates_float_drift():
    box = (0.1, 0.1, 0.3, 0.3)
    gt = _gt([(0, box, ["man"])], [])
    drifted = tuple(v + 1e-7 for v in box)
    assert isinstance(match_subgraph(_query([["man"]], []), gt, drifted), CorrespondenceLabel)


@pytest.mark.parametrize("embed", [True, False])
def test_match_subgraph_agrees_with_exhaustive_enumeration(embed):
    rng = np.random.default_rng(7 if embed else 8)
    for _ in range(60):
        n = int(rng.integers(2, 9))
        q, gt, ref = random_annotated_instance(rng, n, int(rng.integers(1, min(n, 4) + 1)), embed)
        oracle = enumerate_embeddings(q, gt, ref)
        res = match_subgraph(q, gt, ref)
        if not oracle:
            assert res is MatchStatus.NOT_FOUND
        elif len(oracle) > 1:
            assert res is MatchStatus.AMBIGUOUS
        else:
            assert isinstance(res, CorrespondenceLabel) and res.entity_map == oracle[0]

"""Independent brute-force reference implementations used as test oracles.

Everything here is written directly from the definitions with plain Python
or numpy and shares no code with the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def iou_ref(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx0, by0, bx1, by1 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a[2] * a[3] + b[2] * b[3] - inter
    return 0.0 if union <= 0 else inter / union


# ---------------------------------------------------------------------------
# subgraph embedding


def enumerate_embeddings(parsed, gt, referent_box, box_iou: float = 0.99) -> list[dict[int, int]]:
    """Every injective map of parsed entities onto gt nodes that puts the
    root on the referent box and preserves every word, for entities and
    relation edges alike."""
    ents = [e.id for e in parsed.entities]
    nodes = {n.id: n for n in gt.nodes}
    edges = {(r.sub, r.obj, tuple(r.words)) for r in gt.relations}
    out = []
    for perm in itertools.permutations(nodes, len(ents)):
        m = dict(zip(ents, perm))
        if iou_ref(nodes[m[parsed.root]].box, referent_box) < box_iou:
            continue
        if not all(set(e.words) <= nodes[m[e.id]].words for e in parsed.entities):
            continue
        if all((m[r.sub], m[r.obj], tuple(r.words)) in edges for r in parsed.relations):
            out.append(m)
    return out


def enumerate_assignments(graph, world) -> list[dict[int, int]]:
    """All injective entity to object maps satisfying words and predicates."""
    ents = [e.id for e in graph.entities]
    words = {e.id: set(e.words) for e in graph.entities}
    from rcrn.synthgen.world import WORDS_RELATION

    out = []
    for perm in itertools.permutations(range(len(world.objects)), len(ents)):
        m = dict(zip(ents, perm))
        if not all(words[e] <= world.objects[m[e]].words for e in ents):
            continue
        if all(world.predicates.holds(WORDS_RELATION[tuple(r.words)], world.objects[m[r.sub]],
                                      world.objects[m[r.obj]]) for r in graph.relations):
            out.append(m)
    return out


# ---------------------------------------------------------------------------
# readout


def min_pool_ref(p_bp: dict, p_td: dict) -> float:
    best = math.inf
    for table in (p_bp, p_td):
        for v in table.values():
            if v < best:
                best = v
    return best


def mismatched_relation_ref(edges, p_bp: dict, p_td: dict) -> int:
    """``edges``: list of (relation id, parent, child). Scans in id order and
    keeps the first strictly smaller signed score."""
    best_id, best = None, math.inf
    for rid, i, j in sorted(edges):
        d = (p_bp[i] - p_bp[j]) + (p_td[j] - p_td[i])
        if d < best:
            best_id, best = rid, d
    return best_id


# ---------------------------------------------------------------------------
# propagation


def topk_ref(values: np.ndarray, ids: list[int], k: int) -> tuple[np.ndarray, list[int]]:
    if len(ids) <= k:
        return values, ids
    order = sorted(range(len(ids)), key=lambda p: (-values[p], ids[p]))[:k]
    order.sort()
    return values[order], [ids[p] for p in order]


def unit_norm_ref(v: np.ndarray) -> np.ndarray:
    m = np.max(np.abs(v)) if v.size else 0.0
    return v / m if m > 1 else v


def grounding_pass_ref(children: dict[int, list[tuple[int, int]]], order_leaves_first: list[int],
                       local: dict[int, np.ndarray], align: dict[int, np.ndarray], beta: dict[int, float],
                       k: int, eps: float = 1e-8) -> dict[int, np.ndarray]:
    """Bottom-up pass with full-index parents and top-K pruned children.

    ``children[i]``: list of (relation id, child id); ``align[rid]``: full
    ``[N_o, N_o]`` alignment (subject rows, object columns)."""
    n = len(next(iter(local.values())))
    ids = list(range(n))
    final = {}
    for i in order_leaves_first:
        if not children.get(i):
            final[i] = unit_norm_ref(local[i])
            continue
        agg = np.ones(n)
        for rid, j in children[i]:
            vals, keep = topk_ref(final[j], ids, k)
            msg = align[rid][:, keep] @ vals
            agg = agg * np.maximum(msg, eps)
        final[i] = unit_norm_ref(local[i] * np.maximum(agg, eps) ** beta[i])
    return final


def pass_ref(order: list[int], ctx: dict[int, list[tuple[int, int, bool]]], own: dict[int, tuple[np.ndarray, list[int]]],
             align: dict[int, np.ndarray], beta: dict[int, float], k: int,
             eps: float = 1e-8) -> dict[int, tuple[np.ndarray, list[int]]]:
    """One directional sweep over explicit index sets.

    ``ctx[i]``: (relation id, neighbour, neighbour_is_object). Alignments are
    full ``[N_o, N_o]`` matrices with subject rows and object columns, indexed
    by proposal id."""
    final = {}
    for i in order:
        vals, ids = own[i]
        if not ctx.get(i):
            final[i] = (unit_norm_ref(vals), ids)
            continue
        agg = np.ones(len(ids))
        for rid, nb, nb_is_object in ctx[i]:
            nv, nids = topk_ref(*final[nb], k)
            if nb_is_object:
                a = align[rid][np.ix_(ids, nids)]
            else:
                a = align[rid][np.ix_(nids, ids)].T
            agg = agg * np.maximum(a @ nv, eps)
        final[i] = (unit_norm_ref(vals * np.maximum(agg, eps) ** beta[i]), ids)
    return final

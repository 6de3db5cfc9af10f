"""Language scene graphs, visual scenes, box geometry and subgraph matching."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import CycleError, DegenerateBox, DisconnectedError, MultiRootError

Box = tuple[float, float, float, float]  # top-left x, y, width, height in image fractions

BOX_EQ_IOU = 0.99


@dataclass(frozen=True)
class EntityPhrase:
    id: int
    words: tuple[str, ...]
    span: tuple[int, int] | None = None


@dataclass(frozen=True)
class RelationPhrase:
    id: int
    sub: int
    obj: int
    words: tuple[str, ...]
    span: tuple[int, int] | None = None


@dataclass(frozen=True)
class LanguageSceneGraph:
    """Rooted tree: entities are nodes, relations are parent->child edges."""

    entities: tuple[EntityPhrase, ...]
    relations: tuple[RelationPhrase, ...]
    root: int

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def entity(self, eid: int) -> EntityPhrase:
        for e in self.entities:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def relation(self, rid: int) -> RelationPhrase:
        for r in self.relations:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def children(self, eid: int) -> list[RelationPhrase]:
        return sorted((r for r in self.relations if r.sub == eid), key=lambda r: r.id)

    def parent_relation(self, eid: int) -> RelationPhrase | None:
        for r in self.relations:
            if r.obj == eid:
                return r
        return None

    def bfs_order(self) -> list[int]:
        order, queue = [], deque([self.root])
        while queue:
            eid = queue.popleft()
            order.append(eid)
            queue.extend(r.obj for r in self.children(eid))
        return order

    def spo_words(self, rel: RelationPhrase) -> tuple[str, ...]:
        return self.entity(rel.sub).words + rel.words + self.entity(rel.obj).words

    def to_dict(self) -> dict:
        def span(s):
            return None if s is None else list(s)

        return {
            "entities": [{"id": e.id, "words": list(e.words), "span": span(e.span)} for e in self.entities],
            "relations": [
                {"id": r.id, "sub": r.sub, "obj": r.obj, "words": list(r.words), "span": span(r.span)}
                for r in self.relations
            ],
            "root": self.root,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageSceneGraph":
        def span(s):
            return None if s is None else (int(s[0]), int(s[1]))

        ents = tuple(
            EntityPhrase(int(e["id"]), tuple(e["words"]), span(e.get("span"))) for e in d["entities"]
        )
        rels = tuple(
            RelationPhrase(int(r["id"]), int(r["sub"]), int(r["obj"]), tuple(r["words"]), span(r.get("span")))
            for r in d["relations"]
        )
        return cls(ents, rels, int(d["root"]))


@dataclass(frozen=True, eq=False)
class BoxProposal:
    id: int
    box: Box
    feat: np.ndarray
    score: float = 1.0


@dataclass(frozen=True, eq=False)
class VisualScene:
    proposals: tuple[BoxProposal, ...]
    image_size: tuple[int, int] = (640, 480)

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    def boxes(self) -> np.ndarray:
        return np.array([p.box for p in self.proposals], dtype=np.float64).reshape(-1, 4)

    def feats(self) -> np.ndarray:
        return np.stack([np.asarray(p.feat, dtype=np.float64) for p in self.proposals])

    def to_dict(self) -> dict:
        return {
            "proposals": [
                {"id": p.id, "box": [float(v) for v in p.box], "score": float(p.score),
                 "feat": [float(v) for v in p.feat]}
                for p in self.proposals
            ],
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VisualScene":
        props = tuple(
            BoxProposal(int(p["id"]), tuple(float(v) for v in p["box"]), np.asarray(p["feat"], dtype=np.float64),
                        float(p.get("score", 1.0)))
            for p in d["proposals"]
        )
        return cls(props, tuple(d.get("image_size", (640, 480))))


def validate_box(box: Sequence[float]) -> bool:
    x, y, w, h = box
    return x >= 0 and y >= 0 and w >= 0 and h >= 0 and x + w <= 1 + 1e-9 and y + h <= 1 + 1e-9


def validate_tree(graph: LanguageSceneGraph) -> None:
    """Raise a :class:`TreeError` subclass unless ``graph`` is a rooted tree
    whose relations all point from parent (subject) to child (object)."""
    ids = [e.id for e in graph.entities]
    if len(set(ids)) != len(ids):
        raise MultiRootError("duplicate entity ids")
    nodes = set(ids)
    if graph.root not in nodes:
        raise MultiRootError(f"root {graph.root} is not an entity")
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for r in graph.relations:
        if r.sub not in nodes or r.obj not in nodes:
            raise DisconnectedError(f"relation {r.id} references a missing entity")
        if r.sub == r.obj:
            raise CycleError(f"relation {r.id} is a self-loop")
        adj[r.sub].append(r.obj)
        adj[r.obj].append(r.sub)

    seen = {graph.root}
    queue = deque([graph.root])
    while queue:
        n = queue.popleft()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                queue.append(m)
    n_edges, n_nodes = len(graph.relations), len(nodes)
    if n_edges > n_nodes - 1:
        raise CycleError(f"{n_edges} relations over {n_nodes} entities")
    if len(seen) != n_nodes:
        raise DisconnectedError(f"entities {sorted(nodes - seen)} unreachable from root")

    indeg = {n: 0 for n in nodes}
    for r in graph.relations:
        indeg[r.obj] += 1
    if indeg[graph.root] != 0:
        raise MultiRootError("root is the object of a relation")
    extra = sorted(n for n in nodes if n != graph.root and indeg[n] == 0)
    if extra:
        raise MultiRootError(f"entities {extra} have no parent relation")


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    # areas from corners so that identical boxes give exactly one
    area_a = max(0.0, ax + aw - ax) * max(0.0, ay + ah - ay)
    area_b = max(0.0, bx + bw - bx) * max(0.0, by + bh - by)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def relative_spatial(box_i: Sequence[float], box_j: Sequence[float]) -> np.ndarray:
    xi, yi, wi, hi = box_i
    xj, yj, wj, hj = box_j
    if wi <= 0 or hi <= 0:
        raise DegenerateBox(f"reference box {tuple(box_i)} has zero extent")
    xc, yc = xi + wi / 2.0, yi + hi / 2.0
    return np.array(
        [(xj - xc) / wi, (yj - yc) / hi, (xj + wj - xc) / wi, (yj + hj - yc) / hi, (wj * hj) / (wi * hi)],
        dtype=np.float64,
    )


def location_vector(box: Sequence[float]) -> np.ndarray:
    x, y, w, h = box
    return np.array([x, y, w, h, w * h], dtype=np.float64)


# ---------------------------------------------------------------------------
# ground-truth correspondence recovery


@dataclass(frozen=True)
class GTNode:
    id: int
    box: Box
    words: frozenset[str]


@dataclass(frozen=True)
class GTRelation:
    sub: int
    obj: int
    words: tuple[str, ...]


@dataclass(frozen=True)
class AnnotatedSceneGraph:
    nodes: tuple[GTNode, ...]
    relations: tuple[GTRelation, ...]

    def node(self, nid: int) -> GTNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def has_edge(self, sub: int, obj: int, words: tuple[str, ...]) -> bool:
        return GTRelation(sub, obj, tuple(words)) in self._edge_set

    @property
    def _edge_set(self) -> frozenset[GTRelation]:
        cached = self.__dict__.get("_edges")
        if cached is None:
            cached = frozenset(self.relations)
            object.__setattr__(self, "_edges", cached)
        return cached


@dataclass(frozen=True)
class CorrespondenceLabel:
    entity_map: dict[int, int]
    relation_map: dict[int, tuple[int, int]] = field(default_factory=dict)
    unique: bool = True


class MatchStatus(enum.Enum):
    NOT_FOUND = "not_found"
    AMBIGUOUS = "ambiguous"


def phrase_consistent(entity: EntityPhrase, node: GTNode) -> bool:
    return set(entity.words) <= node.words


def _successors(state: tuple[int, ...], order: list[int], parsed: LanguageSceneGraph,
                gt: AnnotatedSceneGraph) -> Iterator[tuple[int, ...]]:
    # grow the partial subgraph by the next parsed entity whose parent is already placed
    pos = len(state)
    eid = order[pos]
    rel = parsed.parent_relation(eid)
    parent_gt = state[order.index(rel.sub)]
    used = set(state)
    ent = parsed.entity(eid)
    for node in gt.nodes:
        if node.id in used or not phrase_consistent(ent, node):
            continue
        if gt.has_edge(parent_gt, node.id, rel.words):
            yield state + (node.id,)


def match_subgraph(parsed: LanguageSceneGraph, gt_graph: AnnotatedSceneGraph,
                   referent_box: Sequence[float]) -> CorrespondenceLabel | MatchStatus:
    """Locate ``parsed`` inside ``gt_graph`` with its root on ``referent_box``.

    Depth-first expansion from every gt node sitting on the referent box; the
    search runs to exhaustion so that non-unique embeddings are reported.
    """
    order = parsed.bfs_order()
    root = parsed.entity(parsed.root)
    stack: list[tuple[int, ...]] = [
        (n.id,) for n in gt_graph.nodes
        if iou(n.box, referent_box) >= BOX_EQ_IOU and phrase_consistent(root, n)
    ]
    found: list[tuple[int, ...]] = []
    while stack:
        g = stack.pop()
        if len(g) == len(order):
            found.append(g)
            if len(found) > 1:
                return MatchStatus.AMBIGUOUS
            continue
        stack.extend(_successors(g, order, parsed, gt_graph))
    if not found:
        return MatchStatus.NOT_FOUND
    emap = dict(zip(order, found[0]))
    rmap = {r.id: (emap[r.sub], emap[r.obj]) for r in parsed.relations}
    return CorrespondenceLabel(emap, rmap, unique=True)


def serialize(graph: LanguageSceneGraph) -> tuple[list[str], LanguageSceneGraph]:
    """Linearise the tree pre-order (entity words, then each relation followed
    by its child subtree) and return the tokens with spans filled in."""
    tokens: list[str] = []
    ent_spans: dict[int, tuple[int, int]] = {}
    rel_spans: dict[int, tuple[int, int]] = {}

    def visit(eid: int) -> None:
        words = graph.entity(eid).words
        ent_spans[eid] = (len(tokens), len(tokens) + len(words))
        tokens.extend(words)
        for rel in graph.children(eid):
            rel_spans[rel.id] = (len(tokens), len(tokens) + len(rel.words))
            tokens.extend(rel.words)
            visit(rel.obj)

    visit(graph.root)
    ents = tuple(EntityPhrase(e.id, e.words, ent_spans[e.id]) for e in graph.entities)
    rels = tuple(RelationPhrase(r.id, r.sub, r.obj, r.words, rel_spans[r.id]) for r in graph.relations)
    return tokens, LanguageSceneGraph(ents, rels, graph.root)

"""Abstract desk-scale scenes: attributed boxes and crisp relation predicates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..graphs import AnnotatedSceneGraph, Box, BoxProposal, GTNode, GTRelation, VisualScene, iou

COLORS = ("red", "green", "blue", "yellow", "purple", "gray")
SHAPES = ("cube", "sphere", "cylinder", "cone")
SIZES = ("small", "medium", "large")
SIZE_RANGE = {"small": (0.08, 0.12), "medium": (0.14, 0.18), "large": (0.22, 0.28)}

SPATIAL = ("left-of", "right-of", "above", "below", "inside", "near")
SEMANTIC = ("same-color", "same-shape")

RELATION_WORDS = {
    "left-of": ("left", "of"),
    "right-of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
    "inside": ("inside",),
    "near": ("near",),
    "same-color": ("same", "color", "as"),
    "same-shape": ("same", "shape", "as"),
}
WORDS_RELATION = {v: k for k, v in RELATION_WORDS.items()}

# replacement candidates: contextually close phrases with different truth conditions
SUBSTITUTIONS = {
    "left-of": ("right-of", "above", "below"),
    "right-of": ("left-of", "above", "below"),
    "above": ("below", "left-of", "right-of"),
    "below": ("above", "left-of", "right-of"),
    "inside": ("left-of", "right-of", "above", "below"),
    "near": ("inside", "above", "below"),
    "same-color": ("same-shape",),
    "same-shape": ("same-color",),
}

FEAT_DIM = len(COLORS) + len(SHAPES) + len(SIZES) + 1  # attributes one-hot + background flag


@dataclass(frozen=True)
class SynthObject:
    id: int
    color: str
    shape: str
    size: str
    box: Box

    @property
    def words(self) -> frozenset[str]:
        return frozenset((self.color, self.shape, self.size))

    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return x + w / 2.0, y + h / 2.0


@dataclass(frozen=True)
class Predicates:
    margin: float = 0.05
    near: float = 0.2
    inside_ioa: float = 0.9

    def holds(self, rel: str, a: SynthObject, b: SynthObject) -> bool:
        (ax, ay), (bx, by) = a.center(), b.center()
        m = self.margin
        if rel == "left-of":
            return ax < bx - m
        if rel == "right-of":
            return ax > bx + m
        if rel == "above":
            return ay < by - m
        if rel == "below":
            return ay > by + m
        if rel == "near":
            return math.hypot(ax - bx, ay - by) < self.near
        if rel == "inside":
            return intersection_over_a(a.box, b.box) > self.inside_ioa
        if rel == "same-color":
            return a.color == b.color
        if rel == "same-shape":
            return a.shape == b.shape
        raise KeyError(f"unknown relation {rel!r}")


def intersection_over_a(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    area = aw * ah
    return 0.0 if area <= 0 else iw * ih / area


@dataclass(frozen=True)
class SynthWorld:
    objects: tuple[SynthObject, ...]
    relations: tuple[str, ...] = SPATIAL + ("same-color",)
    predicates: Predicates = field(default_factory=Predicates)

    def obj(self, oid: int) -> SynthObject:
        return self.objects[oid]

    def holds(self, rel: str, a: int, b: int) -> bool:
        return self.predicates.holds(rel, self.objects[a], self.objects[b])

    def true_relations(self, a: int, b: int) -> list[str]:
        return [r for r in self.relations if self.holds(r, a, b)]

    def annotated_graph(self) -> AnnotatedSceneGraph:
        nodes = tuple(GTNode(o.id, o.box, o.words) for o in self.objects)
        rels = tuple(
            GTRelation(a.id, b.id, RELATION_WORDS[r])
            for a in self.objects for b in self.objects if a.id != b.id
            for r in self.relations if self.predicates.holds(r, a, b)
        )
        return AnnotatedSceneGraph(nodes, rels)

    def to_dict(self) -> dict:
        return {
            "objects": [{"id": o.id, "color": o.color, "shape": o.shape, "size": o.size,
                         "box": [round(v, 6) for v in o.box]} for o in self.objects],
            "relations": list(self.relations),
            "predicates": {"margin": self.predicates.margin, "near": self.predicates.near,
                           "inside_ioa": self.predicates.inside_ioa},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthWorld":
        objs = tuple(SynthObject(int(o["id"]), o["color"], o["shape"], o["size"], tuple(o["box"])) for o in d["objects"])
        return cls(objs, tuple(d["relations"]), Predicates(**d["predicates"]))


def _rounded(box) -> Box:
    return tuple(round(float(v), 6) for v in box)


def random_world(rng: np.random.Generator, n_objects: int, relations=SPATIAL + ("same-color",),
                 predicates: Predicates | None = None, p_inside: float = 0.3, max_tries: int = 200) -> SynthWorld:
    """Place ``n_objects`` with limited overlap; some small objects are put
    inside large ones so that containment occurs."""
    predicates = predicates or Predicates()
    objs: list[SynthObject] = []
    tries = 0
    while len(objs) < n_objects:
        tries += 1
        if tries > max_tries * n_objects:
            raise RuntimeError("could not place objects")
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        size = SIZES[rng.integers(len(SIZES))]
        hosts = [o for o in objs if o.size == "large"]
        if size == "small" and hosts and rng.random() < p_inside:
            host = hosts[rng.integers(len(hosts))]
            w, h = rng.uniform(*SIZE_RANGE["small"], size=2)
            hx, hy, hw, hh = host.box
            if w >= hw or h >= hh:
                continue
            box = _rounded((hx + rng.uniform(0, hw - w), hy + rng.uniform(0, hh - h), w, h))
            others = [o for o in objs if o is not host]
        else:
            w, h = rng.uniform(*SIZE_RANGE[size], size=2)
            box = _rounded((rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h))
            others = objs
        if any(iou(box, o.box) > 0.1 for o in others):
            continue
        objs.append(SynthObject(len(objs), color, shape, size, box))
    return SynthWorld(tuple(objs), tuple(relations), predicates)


def object_feature(obj: SynthObject, rng: np.random.Generator, noise: float) -> np.ndarray:
    f = np.zeros(FEAT_DIM)
    f[COLORS.index(obj.color)] = 1.0
    f[len(COLORS) + SHAPES.index(obj.shape)] = 1.0
    f[len(COLORS) + len(SHAPES) + SIZES.index(obj.size)] = 1.0
    return f + rng.normal(0.0, noise, FEAT_DIM)


def make_scene(world: SynthWorld, rng: np.random.Generator, n_distractors: int = 2, jitter: float = 0.05,
               noise: float = 0.05, max_proposals: int = 100) -> VisualScene:
    """Detector-like proposals: jittered object boxes plus background boxes,
    in shuffled order."""
    entries = []
    for o in world.objects:
        x, y, w, h = o.box
        dx, dy = rng.normal(0, jitter * w), rng.normal(0, jitter * h)
        dw, dh = rng.normal(0, jitter * w), rng.normal(0, jitter * h)
        nw, nh = max(w + dw, 0.02), max(h + dh, 0.02)
        nx, ny = min(max(x + dx, 0.0), 1.0 - nw), min(max(y + dy, 0.0), 1.0 - nh)
        entries.append(((nx, ny, nw, nh), object_feature(o, rng, noise), float(rng.uniform(0.6, 1.0))))
    for _ in range(n_distractors):
        w, h = rng.uniform(0.06, 0.25, size=2)
        box = (rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h)
        f = rng.normal(0.0, noise, FEAT_DIM)
        f[-1] += 1.0
        entries.append((box, f, float(rng.uniform(0.1, 0.5))))
    entries = entries[:max_proposals]
    order = rng.permutation(len(entries))
    props = tuple(
        BoxProposal(i, _rounded(entries[k][0]), np.round(entries[k][1], 6), round(entries[k][2], 6))
        for i, k in enumerate(order)
    )
    return VisualScene(props)


def substitution_witness(rel: str, sub: str, predicates: Predicates | None = None,
                         rng: np.random.Generator | None = None, tries: int = 2000) -> tuple | None:
    """Search for an object pair where ``rel`` holds and ``sub`` fails."""
    predicates = predicates or Predicates()
    rng = rng or np.random.default_rng(0)
    for _ in range(tries):
        w = random_world(rng, 2, predicates=predicates, p_inside=0.5, relations=SPATIAL + SEMANTIC)
        for a, b in ((0, 1), (1, 0)):
            if w.holds(rel, a, b) and not w.holds(sub, a, b):
                return w, a, b
    return None


Scorer = Callable[[list[str], list[str]], bool]

"""Expression sampling with relation substitution, plus corpus assembly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..errors import GenerationFailed, InsufficientSamples, Rejected
from ..graphs import EntityPhrase, LanguageSceneGraph, RelationPhrase
from ..sample import Sample, dump_jsonl
from .oracle import oracle_match
from .splits import build_splits
from .world import (
    RELATION_WORDS,
    SPATIAL,
    SUBSTITUTIONS,
    WORDS_RELATION,
    Predicates,
    Scorer,
    SynthWorld,
    make_scene,
    random_world,
)

CORPUS_VERSION = 1


def entity_words(obj, attrs: Sequence[str]) -> tuple[str, ...]:
    """Attribute words in canonical order (size, color, shape)."""
    order = {"size": obj.size, "color": obj.color, "shape": obj.shape}
    return tuple(order[a] for a in ("size", "color", "shape") if a in attrs)


def _graph(words: dict[int, tuple[str, ...]], edges: list[tuple[int, int, str]]) -> LanguageSceneGraph:
    ents = tuple(EntityPhrase(e, words[e]) for e in sorted(words))
    rels = tuple(RelationPhrase(i, s, o, RELATION_WORDS[r]) for i, (s, o, r) in enumerate(edges))
    return LanguageSceneGraph(ents, rels, 0)


def sample_expression(world: SynthWorld, entity_count: int, rng: np.random.Generator,
                      retries: int = 50) -> tuple[LanguageSceneGraph, int, dict[int, int]]:
    """Random tree expression over distinct objects whose only satisfying
    assignment is the one it was built from. Returns the graph, the
    referent object id and the entity -> object assignment."""
    n_obj = len(world.objects)
    if entity_count < 1 or entity_count > n_obj:
        raise GenerationFailed(f"cannot describe {entity_count} entities with {n_obj} objects")
    for _ in range(retries):
        assign = {0: int(rng.integers(n_obj))}
        edges: list[tuple[int, int, str]] = []
        ok = True
        for e in range(1, entity_count):
            parent = int(rng.integers(e))
            pobj = assign[parent]
            free = [o for o in range(n_obj) if o not in assign.values()]
            rng.shuffle(free)
            for o in free:
                rels = world.true_relations(pobj, o)
                if rels:
                    assign[e] = o
                    edges.append((parent, e, rels[int(rng.integers(len(rels)))]))
                    break
            else:
                ok = False
                break
        if not ok:
            continue
        attrs = {e: ["shape"] for e in assign}
        while True:
            g = _graph({e: entity_words(world.obj(assign[e]), attrs[e]) for e in assign}, edges)
            found = oracle_match(g, world)
            if len(found) == 1:
                return g, assign[0], dict(assign)
            open_ = [(e, a) for e in sorted(assign) for a in ("color", "size") if a not in attrs[e]]
            if not open_:
                break
            e, a = open_[int(rng.integers(len(open_)))]
            attrs[e].append(a)
    raise GenerationFailed(f"no unique {entity_count}-entity expression after {retries} attempts")


@dataclass(frozen=True)
class Substitution:
    relation_id: int
    original: str
    replacement: str


def substitute(graph: LanguageSceneGraph, rid: int, replacement: str) -> LanguageSceneGraph:
    rels = tuple(
        RelationPhrase(r.id, r.sub, r.obj, RELATION_WORDS[replacement] if r.id == rid else r.words)
        for r in graph.relations
    )
    return LanguageSceneGraph(tuple(EntityPhrase(e.id, e.words) for e in graph.entities), rels, graph.root)


def mismatch_options(graph: LanguageSceneGraph, world: SynthWorld, scorer: Scorer | None = None) -> list[Substitution]:
    """Every single-relation substitution that leaves the expression
    unsatisfiable anywhere in the scene."""
    out = []
    for r in graph.relations:
        orig = WORDS_RELATION[tuple(r.words)]
        for rep in SUBSTITUTIONS[orig]:
            if rep not in world.relations:
                continue
            g = substitute(graph, r.id, rep)
            if oracle_match(g, world):
                continue
            if scorer is not None and not scorer(list(graph.spo_words(r)), list(g.spo_words(g.relation(r.id)))):
                continue
            out.append(Substitution(r.id, orig, rep))
    return out


def make_mismatch(graph: LanguageSceneGraph, world: SynthWorld, rng: np.random.Generator,
                  scorer: Scorer | None = None,
                  choose: Callable[[list[Substitution]], Substitution] | None = None,
                  ) -> tuple[LanguageSceneGraph, Substitution]:
    """Replace one relation phrase so that no object satisfies the result.
    Without ``choose`` the relation and its replacement are drawn uniformly
    among the accepted options."""
    if graph.num_relations == 0:
        raise Rejected("expression has no relation to substitute")
    opts = mismatch_options(graph, world, scorer)
    if not opts:
        raise Rejected("every substitution still describes some object")
    if choose is not None:
        sub = choose(opts)
    else:
        rids = sorted({o.relation_id for o in opts})
        rid = rids[int(rng.integers(len(rids)))]
        pool = [o for o in opts if o.relation_id == rid]
        sub = pool[int(rng.integers(len(pool)))]
    return substitute(graph, sub.relation_id, sub.replacement), sub


class FrequencyBalancer:
    """Greedy bias control: pick the substitution that keeps the matched and
    mismatched relation-frequency vectors closest."""

    def __init__(self, relations: Sequence[str]):
        self.relations = list(relations)
        self.diff = dict.fromkeys(self.relations, 0)

    def cost(self, sub: Substitution) -> int:
        d = dict(self.diff)
        d[sub.original] -= 1
        d[sub.replacement] += 1
        return sum(abs(v) for v in d.values())

    def choose(self, opts: list[Substitution], rng: np.random.Generator) -> Substitution:
        costs = [self.cost(o) for o in opts]
        best = [o for o, c in zip(opts, costs) if c == min(costs)]
        return best[int(rng.integers(len(best)))]

    def commit(self, sub: Substitution) -> None:
        self.diff[sub.original] -= 1
        self.diff[sub.replacement] += 1


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 2000
    n_indist: int = 500
    n_ood: int = 500
    train_entities: tuple[int, ...] = (2, 3)
    ood_entities: tuple[int, ...] = (4, 5)
    thresholds: tuple[int, int] = (3, 5)
    objects: tuple[int, int] = (6, 8)
    distractors: int = 2
    relations: tuple[str, ...] = SPATIAL + ("same-color",)
    margin: float = 0.05
    near: float = 0.2
    inside_ioa: float = 0.9
    p_inside: float = 0.3
    jitter: float = 0.05
    feature_noise: float = 0.05
    tv_bound: float = 0.05
    max_attempts_factor: int = 20

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("train_entities", "ood_entities", "thresholds", "objects", "relations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def predicates(self) -> Predicates:
        return Predicates(self.margin, self.near, self.inside_ioa)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_pair(config: SynthConfig, index: int, entity_count: int,
                  balancer: FrequencyBalancer | None = None, scorer: Scorer | None = None) -> tuple[Sample, Sample]:
    """A matched sample and its one-relation-different mismatched twin."""
    rng = sample_rng(config.seed, index)
    n_obj = int(rng.integers(config.objects[0], config.objects[1] + 1))
    world = random_world(rng, max(n_obj, entity_count), config.relations, config.predicates, config.p_inside)
    graph, referent, assign = sample_expression(world, entity_count, rng)
    choose = None if balancer is None else (lambda opts: balancer.choose(opts, rng))
    bad, sub = make_mismatch(graph, world, rng, scorer, choose)
    if balancer is not None:
        balancer.commit(sub)
    scene = make_scene(world, rng, config.distractors, config.jitter, config.feature_noise)
    pair = f"p{index:06d}"
    prov = {"seed": [config.seed, index], "pair": pair}
    wd = world.to_dict()
    matched = Sample.build(
        f"{pair}-m", graph, scene, 1, referent_box=world.obj(referent).box,
        extra={"world": wd, "provenance": prov, "assignment": {str(k): v for k, v in sorted(assign.items())}},
    )
    mismatched = Sample.build(
        f"{pair}-x", bad, scene, 0, mismatched_relation=sub.relation_id,
        extra={"world": wd, "provenance": {**prov, "substitution": asdict(sub)}},
    )
    return matched, mismatched


def world_of(sample: Sample) -> SynthWorld:
    return SynthWorld.from_dict(sample.extra["world"])


def generate_corpus(config: SynthConfig, scorer: Scorer | None = None) -> tuple[list[Sample], dict]:
    """Pairs for every split; returns tagged samples and the stats report."""
    balancer = FrequencyBalancer(config.relations)
    plan = ((config.n_train + config.n_indist) // 2, config.train_entities), (config.n_ood // 2, config.ood_entities)
    samples: list[Sample] = []
    index = 0
    for want_pairs, counts in plan:
        got, attempts = 0, 0
        while got < want_pairs:
            attempts += 1
            if attempts > config.max_attempts_factor * want_pairs:
                raise InsufficientSamples(f"only {got} of {want_pairs} pairs after {attempts - 1} attempts")
            i = index
            index += 1
            try:
                m, x = generate_pair(config, i, counts[i % len(counts)], balancer, scorer)
            except (GenerationFailed, Rejected, RuntimeError):
                continue
            samples.extend((m, x))
            got += 1
    holdout = (config.n_indist // 2) / max((config.n_train + config.n_indist) // 2, 1)
    return build_splits(samples, config.thresholds, config.relations, config.tv_bound, holdout, config.seed)


def write_corpus(out_dir: str | Path, config: SynthConfig, scorer: Scorer | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples, stats = generate_corpus(config, scorer)
    dump_jsonl(samples, out / "samples.jsonl")
    splits = {"version": CORPUS_VERSION, "config": config.to_dict(), "splits": {}}
    for s in samples:
        splits["splits"].setdefault(s.split, []).append(s.id)
    (out / "splits.json").write_text(json.dumps(splits, sort_keys=True, indent=1) + "\n")
    (out / "stats.json").write_text(json.dumps({"version": CORPUS_VERSION, **stats}, sort_keys=True, indent=1) + "\n")
    return stats

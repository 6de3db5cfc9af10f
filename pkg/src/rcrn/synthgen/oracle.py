"""Exhaustive satisfiability check of an expression against a synthetic world."""

from __future__ import annotations

from ..errors import BudgetExceeded
from ..graphs import LanguageSceneGraph
from .world import WORDS_RELATION, SynthObject, SynthWorld

MAX_ENTITIES = 8


def entity_satisfied(words, obj: SynthObject) -> bool:
    return set(words) <= obj.words


def oracle_match(graph: LanguageSceneGraph, world: SynthWorld) -> list[dict[int, int]]:
    """All injective entity -> object assignments satisfying every attribute
    word and every relation predicate."""
    if graph.num_entities > MAX_ENTITIES:
        raise BudgetExceeded(f"{graph.num_entities} entities exceed the search budget of {MAX_ENTITIES}")
    order = graph.bfs_order()
    parent = {}
    for eid in order[1:]:
        rel = graph.parent_relation(eid)
        parent[eid] = (rel.sub, WORDS_RELATION[tuple(rel.words)])
    cands = {e.id: [o.id for o in world.objects if entity_satisfied(e.words, o)] for e in graph.entities}

    found: list[dict[int, int]] = []

    def extend(pos: int, assign: dict[int, int]) -> None:
        if pos == len(order):
            found.append(dict(assign))
            return
        eid = order[pos]
        used = set(assign.values())
        for oid in cands[eid]:
            if oid in used:
                continue
            if eid in parent:
                pid, rel = parent[eid]
                if not world.holds(rel, assign[pid], oid):
                    continue
            assign[eid] = oid
            extend(pos + 1, assign)
            del assign[eid]

    extend(0, {})
    return found

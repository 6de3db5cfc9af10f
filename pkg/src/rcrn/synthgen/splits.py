"""Split assignment by entity count and corpus statistics."""

from __future__ import annotations

import dataclasses
from collections import Counter
from typing import Sequence

import numpy as np

from ..errors import InsufficientSamples
from ..sample import Sample
from .world import WORDS_RELATION

TRAIN, IN_DIST, OOD = "train", "in-dist-test", "ood-test"
SPLITS = (TRAIN, IN_DIST, OOD)


def pair_key(sample: Sample) -> str:
    return sample.extra.get("provenance", {}).get("pair", sample.id)


def split_for(entity_count: int, thresholds: tuple[int, int]) -> str | None:
    """``train`` range for counts up to the first threshold, ``ood`` up to the
    second; larger expressions are dropped."""
    t_train, t_max = thresholds
    if entity_count <= t_train:
        return TRAIN
    if entity_count <= t_max:
        return OOD
    return None


def relation_counts(samples: Sequence[Sample], relations: Sequence[str]) -> dict[str, int]:
    c = Counter(WORDS_RELATION[tuple(r.words)] for s in samples for r in s.graph.relations)
    return {r: int(c.get(r, 0)) for r in relations}


def total_variation(a: dict[str, int], b: dict[str, int]) -> float:
    keys = sorted(set(a) | set(b))
    ta, tb = sum(a.values()), sum(b.values())
    if ta == 0 or tb == 0:
        return 0.0 if ta == tb else 1.0
    return 0.5 * sum(abs(a.get(k, 0) / ta - b.get(k, 0) / tb) for k in keys)


def _block(samples: Sequence[Sample], relations: Sequence[str]) -> dict:
    m = [s for s in samples if s.match]
    x = [s for s in samples if not s.match]
    rm, rx = relation_counts(m, relations), relation_counts(x, relations)
    return {
        "samples": len(samples),
        "matched": len(m),
        "mismatched": len(x),
        "relations_matched": rm,
        "relations_mismatched": rx,
        "relation_tv": total_variation(rm, rx),
        "length_histogram": {str(k): v for k, v in sorted(Counter(len(s.tokens) for s in samples).items())},
        "entity_histogram": {str(k): v for k, v in sorted(Counter(s.num_entities for s in samples).items())},
    }


def corpus_stats(samples: Sequence[Sample], relations: Sequence[str], tv_bound: float) -> dict:
    stats = {"full": _block(samples, relations)}
    for split in SPLITS:
        stats[split] = _block([s for s in samples if s.split == split], relations)
    stats["tv_bound"] = tv_bound
    stats["tv_within_bound"] = stats["full"]["relation_tv"] <= tv_bound
    return stats


def build_splits(samples: Sequence[Sample], thresholds: tuple[int, int] = (3, 5),
                 relations: Sequence[str] = tuple(WORDS_RELATION.values()), tv_bound: float = 0.05,
                 holdout: float = 0.2, seed: int = 0) -> tuple[list[Sample], dict]:
    """Tag samples (twins stay together), hold out a seeded fraction of the
    training range as in-distribution test, and report statistics."""
    pairs: dict[str, list[Sample]] = {}
    for s in samples:
        pairs.setdefault(pair_key(s), []).append(s)
    in_range = sorted(k for k, v in pairs.items() if split_for(v[0].num_entities, thresholds) == TRAIN)
    rng = np.random.default_rng(seed)
    n_hold = int(round(holdout * len(in_range)))
    held = set(np.asarray(in_range)[rng.permutation(len(in_range))[:n_hold]].tolist()) if in_range else set()
    out = []
    for key in sorted(pairs):
        group = pairs[key]
        split = split_for(group[0].num_entities, thresholds)
        if split is None:
            continue
        if split == TRAIN and key in held:
            split = IN_DIST
        out.extend(dataclasses.replace(s, split=split) for s in sorted(group, key=lambda s: s.id))
    for split in SPLITS:
        part = [s for s in out if s.split == split]
        n_m = sum(s.match for s in part)
        if not part:
            raise InsufficientSamples(f"split {split!r} is empty")
        if 2 * n_m != len(part):
            raise InsufficientSamples(f"split {split!r} is unbalanced: {n_m} matched of {len(part)}")
    return out, corpus_stats(out, relations, tv_bound)

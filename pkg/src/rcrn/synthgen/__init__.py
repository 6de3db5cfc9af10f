"""Synthetic benchmark of abstract scenes paired with tree expressions.

Mismatched twins are oracle-verified and splits follow entity counts."""

from .generate import (
    CORPUS_VERSION,
    FrequencyBalancer,
    Substitution,
    SynthConfig,
    generate_corpus,
    generate_pair,
    make_mismatch,
    mismatch_options,
    sample_expression,
    substitute,
    world_of,
    write_corpus,
)
from .oracle import MAX_ENTITIES, oracle_match
from .splits import IN_DIST, OOD, SPLITS, TRAIN, build_splits, corpus_stats, split_for, total_variation
from .world import (
    COLORS,
    FEAT_DIM,
    RELATION_WORDS,
    SEMANTIC,
    SHAPES,
    SIZES,
    SPATIAL,
    SUBSTITUTIONS,
    Predicates,
    SynthObject,
    SynthWorld,
    make_scene,
    random_world,
    substitution_witness,
)

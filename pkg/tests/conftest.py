"""Shared fixtures: single-threaded torch and a tiny corpus."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """A small synthetic corpus shared across the end-to-end tests."""
    from rcrn.synthgen import SynthConfig, generate_corpus

    samples, stats = generate_corpus(SynthConfig(seed=3, n_train=40, n_indist=20, n_ood=20))
    return samples, stats

"""Shared fixtures: one small synthetic world reused across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from prefopt.dataio import PlantedReward, SyntheticSpec, generate_synthetic, score_references
from prefopt.toypolicy import default_vocab, make_reference_family


class SmallWorld:
    """A compact dataset with a weak initializing reference and a strong
    second reference, plus caches for both splits."""

    def __init__(self, seed: int = 11, pairs: int = 240, noise: float = 0.0):
        self.vocab = default_vocab()
        self.reward = PlantedReward(self.vocab, seed=seed)
        self.spec = SyntheticSpec(seed=seed, pairs=pairs, noise_rate=noise,
                                  reward=self.reward)
        self.train_data, self.test_data = generate_synthetic(self.spec)
        self.ref_weak = make_reference_family(seed + 100, 0.2, self.reward)
        self.ref_strong = make_reference_family(seed + 200, 0.9, self.reward)
        self.refs = [self.ref_weak, self.ref_strong]
        self.train_cache = score_references(self.train_data, self.refs)
        self.test_cache = score_references(self.test_data, self.refs)
        self.train_cache_k1 = score_references(self.train_data, [self.ref_weak])
        self.test_cache_k1 = score_references(self.test_data, [self.ref_weak])


@pytest.fixture(scope="session")
def small_world() -> SmallWorld:
    return SmallWorld()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)

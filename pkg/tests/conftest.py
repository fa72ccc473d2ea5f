"""Shared fixtures: tiny deterministic datasets and models sized for fast tests."""

import numpy as np
import pytest

from perimem.data import generate_synthetic
from perimem.model import ModelConfig, ResponseModel
from perimem.validation import feature_counts, infer_vocab_sizes


def tiny_config(samples, **overrides) -> ModelConfig:
    """Small architecture covering every code path; cheap enough to finite-difference."""
    kwargs = dict(
        vocab_sizes=infer_vocab_sizes(samples),
        periods=(1, 2, 4),
        slot_dim=8,
        embed_dim=8,
        energy_hidden=16,
        mlp_hidden=(32, 16),
        seed=1,
        **feature_counts(samples),
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture(scope="session")
def small_samples():
    samples, _ = generate_synthetic(6, 12, 10, 5, seed=3)
    return samples


@pytest.fixture(scope="session")
def small_model(small_samples):
    return ResponseModel.init(tiny_config(small_samples))


@pytest.fixture()
def rng():
    return np.random.default_rng(7)

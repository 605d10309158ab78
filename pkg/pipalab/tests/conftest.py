"""
Test configuration and fixtures for the PIPA laboratory.

This module provides pytest fixtures and small builders for bundles with
hand-picked token probabilities, random bundles and tiny synthetic worlds.
"""

import math
from typing import Sequence

import numpy as np
import pytest

from pipalab.config import Settings, get_settings, reset_settings
from pipalab.core.synthworld import make_world
from pipalab.core.tabular import ModelBundle, TabularPolicy, ValueTable
from pipalab.models.models import Example, LossConfig, LossKind


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Every test starts from environment-free settings."""
    for name in Settings.model_fields:
        monkeypatch.delenv(f"PIPALAB_{name}", raising=False)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def settings():
    """Provide test settings."""
    return get_settings()


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(1234)


def one_token_bundle(f: float, g: float, p: float) -> ModelBundle:
    """
    V=2, T=1 bundle whose token 0 has policy probability ``f``, value ``g``
    and prior probability ``p``.
    """
    prompts = [(0,)]
    policy = TabularPolicy(2, 1, 0, prompts, logits={(0, ()): np.log([f, 1.0 - f])})
    prior = TabularPolicy(2, 1, 0, prompts, logits={(0, ()): np.log([p, 1.0 - p])}, frozen=True)
    value = ValueTable(2, 1, 0, prompts, raw={(0, ()): math.log(g / (1.0 - g))})
    return ModelBundle(policy, value, prior)


def uniform_bundle(vocab: int, length: int, window: int = 2, prompts: Sequence = ((0,),)) -> ModelBundle:
    """Policy equal to a uniform frozen prior, g = 0.5 everywhere."""
    prior = TabularPolicy.uniform(vocab, length, window, list(prompts), frozen=True)
    return ModelBundle.from_prior(prior)


def token_example(label: int) -> Example:
    return Example(prompt=(0,), answer=(0,), labels=(label,))


@pytest.fixture
def pipa_m_config():
    return LossConfig(kind=LossKind.PIPA_M, epsilon=1e-6)


@pytest.fixture
def small_world():
    """|X|=2, V=3, T=2 world."""
    return make_world(seed=7, prompts=2, vocab=3, length=2)


@pytest.fixture
def step_world():
    """|X|=2, V=3, T=3 world with a pinned correct-prefix mass."""
    return make_world(seed=11, prompts=2, vocab=3, length=3, correct_prefix_mass=0.6)

"""
Tests for tabular policies, value tables, bundles, SFT fitting, checkpoints
and optimizers.
"""

import math

import numpy as np
import pytest

from pipalab.core.exceptions import FrozenModelException, InvalidInputException, ResourceLimitException
from pipalab.core.gradengine import Tape
from pipalab.core.optim import SGD, Adam, make_optimizer
from pipalab.core.tabular import (
    ModelBundle,
    TabularPolicy,
    ValueTable,
    enumerate_sequences,
    fit_sft,
    kl_divergence,
    load_bundle,
    load_policy,
    save_bundle,
    save_policy,
    sequence_distribution,
    softmax,
    tv_distance,
)
from pipalab.models.models import Dataset, Example, OptimizerKind, Selector, TrainConfig


@pytest.mark.unit
class TestTabularPolicy:
    def test_uniform_next_token(self):
        policy = TabularPolicy.uniform(4, 2, 1, [(0,)])
        assert np.allclose(policy.next_token_dist((0,), []), [0.25] * 4)

    def test_closed_form(self):
        policy = TabularPolicy(2, 1, 0, [(0,)], logits={(0, ()): np.array([0.0, math.log(3.0)])})
        assert np.allclose(policy.next_token_dist(0, []), [0.25, 0.75])

    def test_sequence_logprob(self):
        policy = TabularPolicy.uniform(2, 3, 2, [(0,)])
        assert policy.sequence_logprob((0,), (0, 1, 1)) == pytest.approx(3 * math.log(0.5))
        assert policy.sequence_logprob((0,), (0, 1, 1)) == pytest.approx(-2.0794, abs=1e-4)

    def test_logprob_matches_product(self, rng):
        policy = TabularPolicy(3, 3, 2, [(0,)])
        for ctx in policy.contexts():
            policy.logits[ctx] = rng.normal(size=3)
        answer = (2, 0, 1)
        product = 1.0
        for t, token in enumerate(answer):
            product *= policy.next_token_dist((0,), answer[:t])[token]
        assert math.exp(policy.sequence_logprob((0,), answer)) == pytest.approx(product, abs=1e-12)

    def test_window_truncates_history(self):
        policy = TabularPolicy.uniform(3, 4, 1, [(0,)])
        assert policy.context((0,), (2, 1, 0)) == (0, (0,))
        assert policy.context((0,), ()) == (0, ())

    def test_unknown_prompt(self):
        policy = TabularPolicy.uniform(2, 2, 1, [(0,)])
        with pytest.raises(InvalidInputException):
            policy.next_token_dist((9,), [])

    def test_frozen_exposes_no_parameters(self):
        policy = TabularPolicy.uniform(2, 2, 1, [(0,)], frozen=True)
        with pytest.raises(FrozenModelException):
            policy.parameter_keys()
        with pytest.raises(FrozenModelException):
            policy.register(Tape(), (0, ()))

    def test_sample_is_seeded(self):
        policy = TabularPolicy.uniform(3, 4, 2, [(0,)])
        first = policy.sample((0,), 4, np.random.default_rng(3))
        assert first == policy.sample((0,), 4, np.random.default_rng(3))
        assert len(first) == 4


@pytest.mark.unit
class TestValueTable:
    def test_default_half(self):
        value = ValueTable(3, 2, 1, [(0,)])
        assert value.probability((0,), [1]) == 0.5

    def test_open_interval(self):
        value = ValueTable(2, 1, 0, [(0,)], raw={(0, ()): 30.0})
        assert 0.0 < value.probability((0,), []) < 1.0
        value.raw[(0, ())] = -30.0
        assert 0.0 < value.probability((0,), []) < 1.0


@pytest.mark.unit
class TestEnumeration:
    def test_normalized(self):
        policy = TabularPolicy.uniform(2, 2, 1, [(0,)])
        sequences = enumerate_sequences(policy, (0,), 2)
        assert [s for s, _ in sequences] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert sum(p for _, p in sequences) == pytest.approx(1.0, abs=1e-9)

    def test_closed_form(self):
        policy = TabularPolicy(3, 1, 0, [(0,)], logits={(0, ()): np.array([0.0, 0.0, math.log(2.0)])})
        assert np.allclose(sequence_distribution(policy, (0,), 1), [0.25, 0.25, 0.5])

    def test_budget(self):
        policy = TabularPolicy.uniform(4, 3, 2, [(0,)])
        with pytest.raises(ResourceLimitException):
            enumerate_sequences(policy, (0,), 3, budget=10)

    def test_distances(self):
        p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
        assert tv_distance(p, q) == pytest.approx(0.25)
        assert kl_divergence(p, p) == 0.0
        assert kl_divergence(p, q) > 0.0


@pytest.mark.unit
class TestModelBundle:
    def test_from_prior(self):
        prior = TabularPolicy.uniform(2, 2, 1, [(0,)], frozen=True)
        bundle = ModelBundle.from_prior(prior)
        assert not bundle.policy.frozen
        assert bundle.prior is prior

    def test_prior_must_be_frozen(self):
        policy = TabularPolicy.uniform(2, 2, 1, [(0,)])
        with pytest.raises(InvalidInputException):
            ModelBundle(policy, ValueTable(2, 2, 1, [(0,)]), policy.copy())

    def test_shapes_must_match(self):
        prior = TabularPolicy.uniform(2, 2, 1, [(0,)], frozen=True)
        with pytest.raises(InvalidInputException):
            ModelBundle(TabularPolicy.uniform(3, 2, 1, [(0,)]), ValueTable(2, 2, 1, [(0,)]), prior)

    def test_vector_round_trip_leaves_prior(self):
        prior = TabularPolicy.uniform(2, 2, 1, [(0,)], frozen=True)
        bundle = ModelBundle.from_prior(prior)
        keys = bundle.trainable_keys()
        before = {ctx: row.copy() for ctx, row in prior.logits.items()}
        bundle.set_vector(keys, np.arange(len(keys), dtype=float))
        assert np.array_equal(bundle.get_vector(keys), np.arange(len(keys), dtype=float))
        for ctx, row in prior.logits.items():
            assert np.array_equal(row, before[ctx])

    def test_copy_is_independent(self):
        bundle = ModelBundle.from_prior(TabularPolicy.uniform(2, 2, 1, [(0,)], frozen=True))
        clone = bundle.copy()
        clone.policy.logits[(0, ())][0] = 5.0
        assert bundle.policy.logits[(0, ())][0] == 0.0


@pytest.mark.unit
class TestFitSft:
    def test_repeated_answer(self):
        records = tuple(Example(prompt=(0,), answer=(2, 1), labels=(1, 1)) for _ in range(20))
        fitted = fit_sft(TabularPolicy.uniform(3, 2, 1, [(0,)]), Dataset(records=records), Selector.POSITIVE,
                         epochs=400, lr=0.1)
        assert fitted.frozen
        assert math.exp(fitted.sequence_logprob((0,), (2, 1))) >= 0.99

    def test_empty_selection(self):
        records = (Example(prompt=(0,), answer=(1,), labels=(0,)),)
        with pytest.raises(InvalidInputException):
            fit_sft(TabularPolicy.uniform(2, 1, 0, [(0,)]), Dataset(records=records), Selector.POSITIVE, 10, 0.1)

    def test_input_untouched(self):
        policy = TabularPolicy.uniform(2, 1, 0, [(0,)])
        records = (Example(prompt=(0,), answer=(1,), labels=(1,)),)
        fit_sft(policy, Dataset(records=records), Selector.ALL, 10, 0.1)
        assert np.array_equal(policy.logits[(0, ())], [0.0, 0.0])


@pytest.mark.unit
class TestCheckpoints:
    def test_policy_round_trip(self, tmp_path, rng):
        policy = TabularPolicy(3, 2, 1, [(0,), (1, 2)], frozen=True)
        for ctx in policy.contexts():
            policy.logits[ctx] = rng.normal(size=3)
        save_policy(policy, tmp_path / "p.txt")
        loaded = load_policy(tmp_path / "p.txt")
        assert loaded.shape == policy.shape and loaded.frozen
        for ctx in policy.contexts():
            assert np.array_equal(loaded.logits[ctx], policy.logits[ctx])

    def test_bundle_round_trip(self, tmp_path):
        bundle = ModelBundle.from_prior(TabularPolicy.uniform(2, 2, 1, [(0,)], frozen=True))
        bundle.value.raw[(0, (1,))] = 0.25
        save_bundle(bundle, tmp_path / "model")
        loaded = load_bundle(tmp_path / "model")
        assert loaded.value.raw[(0, (1,))] == 0.25
        assert loaded.prior.frozen and not loaded.policy.frozen


@pytest.mark.unit
class TestOptimizers:
    def test_sgd(self):
        assert np.allclose(SGD(0.5).step(np.array([1.0]), np.array([2.0])), [0.0])

    def test_zero_lr_is_identity(self):
        params = np.array([1.0, -2.0])
        assert np.array_equal(SGD(0.0).step(params, np.ones(2)), params)
        assert np.array_equal(Adam(0.0).step(params, np.ones(2)), params)

    def test_adam_first_step_moves_by_lr(self):
        out = Adam(0.1).step(np.array([0.0, 0.0]), np.array([3.0, -0.5]))
        assert np.allclose(out, [-0.1, 0.1], atol=1e-6)

    def test_factory(self):
        assert isinstance(make_optimizer(TrainConfig(optimizer=OptimizerKind.SGD)), SGD)
        assert make_optimizer(TrainConfig(), lr=0.3).lr == 0.3

    def test_softmax_shift_invariant(self):
        row = np.array([1000.0, 1001.0])
        assert np.allclose(softmax(row), softmax(row - 1000.0))

"""
Tests for the verification checks and their export.
"""

import csv

import numpy as np
import pytest

from pipalab.core import verify
from pipalab.core.exceptions import InvalidInputException
from pipalab.core.synthworld import make_world, marginal_policy, sample_dataset
from pipalab.core.tabular import ModelBundle, sequence_distribution
from pipalab.core.trainer import train
from pipalab.core.verify import (
    build_prior,
    check_dpo_equivalence,
    check_gradients,
    check_kto_equivalence,
    check_pipa_m_marginal,
    check_reductions,
    check_stop_gradient,
    clip_rate,
    clip_rate_survey,
    count_mle_policy,
    mean_tv,
    recovery_experiment,
    recovery_sweep,
    recovery_train_config,
    reports_to_csv,
    run_checks,
    step_vs_answer_ablation,
    summarize,
    threshold_sweep,
    to_answer_level,
)
from pipalab.models.models import (
    DataLevel,
    Dataset,
    Example,
    ExperimentConfig,
    LossConfig,
    LossKind,
    PriorMode,
    Selector,
    TrainConfig,
    VerificationReport,
    VerifySpec,
)
from pipalab.tests.conftest import one_token_bundle, token_example


@pytest.mark.verify
class TestAlgebraicChecks:
    def test_dpo_equivalence(self):
        report = check_dpo_equivalence(seed=0, trials=200)
        assert report.passed
        assert report.max_discrepancy <= 1e-10

    def test_kto_equivalence(self):
        assert check_kto_equivalence(seed=1, trials=200).passed

    def test_equivalences_score_the_shipped_losses(self, mocker):
        dpo = mocker.spy(verify, "dpo_loss")
        kto = mocker.spy(verify, "kto_loss")
        check_dpo_equivalence(seed=0, trials=7)
        check_kto_equivalence(seed=0, trials=5)
        assert dpo.call_count == 7
        assert kto.call_count == 5

    def test_gradients(self):
        report = check_gradients(seed=0, trials=3)
        assert report.passed
        assert report.trials == 3 * len(LossKind)
        assert "max_error_pipa-m" in report.stats

    def test_stop_gradient(self):
        report = check_stop_gradient(seed=0, trials=10)
        assert report.passed
        assert report.max_discrepancy == 0.0
        assert report.stats["parameters_checked"] > 0

    def test_reductions(self):
        assert check_reductions(seed=0, trials=10).passed

    def test_pipa_m_marginal(self):
        report = check_pipa_m_marginal(seed=0, trials=100)
        assert report.passed
        assert 0.0 <= report.stats["violation_rate"] <= 1.0


@pytest.mark.verify
class TestStatisticalHelpers:
    def test_count_mle_frequencies(self):
        records = (
            Example(prompt=(0,), answer=(0, 1), labels=(1, 1)),
            Example(prompt=(0,), answer=(0, 1), labels=(1, 1)),
            Example(prompt=(0,), answer=(1, 1), labels=(1, 1)),
            Example(prompt=(0,), answer=(1, 0), labels=(0, 0)),
        )
        policy = count_mle_policy(Dataset(records=records), 2, 2, [(0,)])
        assert policy.frozen
        assert np.allclose(sequence_distribution(policy, 0, 2), [0.0, 2 / 3, 0.0, 1 / 3])

    def test_count_mle_converges(self, small_world):
        data = sample_dataset(small_world, 5000, DataLevel.ANSWER, seed=0)
        oracle = count_mle_policy(data, 3, 2, small_world.prompts, Selector.POSITIVE)
        assert mean_tv(oracle, small_world) < 0.1

    def test_clip_rate(self):
        assert clip_rate(one_token_bundle(0.9, 0.9, 0.5), [token_example(0)], 1e-6) == 1.0
        assert clip_rate(one_token_bundle(0.25, 0.5, 0.25), [token_example(0)], 1e-6) == 0.0
        assert clip_rate(one_token_bundle(0.25, 0.5, 0.25), [], 1e-6) == 0.0

    def test_to_answer_level(self, step_world):
        data = to_answer_level(sample_dataset(step_world, 50, DataLevel.STEP, seed=0))
        assert data.level == DataLevel.ANSWER
        assert all(len(set(e.labels)) == 1 for e in data.records)

    def test_exact_priors(self, small_world):
        empty = Dataset(records=())
        marginal = build_prior(small_world, LossKind.PIPA_M, PriorMode.EXACT, empty, 1)
        negative = build_prior(small_world, LossKind.PIPA_N, PriorMode.EXACT, empty, 1)
        assert np.allclose(sequence_distribution(marginal, 0, 2), sequence_distribution(marginal_policy(small_world), 0, 2))
        assert not np.allclose(sequence_distribution(negative, 0, 2), sequence_distribution(marginal, 0, 2))

    def test_sft_prior_for_pipa_n_uses_negatives(self, small_world):
        records = (Example(prompt=(0,), answer=(2, 2), labels=(0, 0)), Example(prompt=(0,), answer=(0, 0), labels=(1, 1)))
        prior = build_prior(small_world, LossKind.PIPA_N, PriorMode.SFT, Dataset(records=records), 1, sft_epochs=300)
        assert prior.frozen
        assert prior.sequence_logprob(0, (2, 2)) > prior.sequence_logprob(0, (0, 0))


@pytest.mark.verify
class TestClipRateSurvey:
    def test_rate_per_snapshot(self):
        snapshots = [one_token_bundle(0.25, 0.5, 0.25), one_token_bundle(0.9, 0.9, 0.5)]
        assert clip_rate_survey(snapshots, [token_example(0)]) == [0.0, 1.0]

    def test_pipa_n_mapping(self):
        snapshots = [one_token_bundle(0.9, 0.9, 0.5)]
        assert clip_rate_survey(snapshots, [token_example(0)], kind=LossKind.PIPA_N) == [0.0]

    def test_fresh_bundle_never_clips(self, small_world):
        data = sample_dataset(small_world, 60, DataLevel.ANSWER, seed=2)
        cfg = TrainConfig(loss=LossConfig(kind=LossKind.PIPA_M), lr=0.05, batch_size=30, epochs=3)
        _, log = train(ModelBundle.from_prior(marginal_policy(small_world)), data, cfg, probe=[], keep_snapshots=True)
        rates = clip_rate_survey([ModelBundle.from_prior(marginal_policy(small_world))] + log.snapshots,
                                 list(data.records))
        assert len(rates) == 4
        assert rates[0] == 0.0
        assert all(0.0 <= r <= 1.0 for r in rates)


@pytest.fixture(scope="module", params=[LossKind.PIPA_M, LossKind.PIPA_N], ids=["pipa-m", "pipa-n"])
def recovery_report(request):
    world = make_world(seed=0, prompts=4, vocab=4, length=2)
    return recovery_experiment(world, request.param, 50_000, recovery_train_config(), prior_mode=PriorMode.EXACT)


@pytest.mark.verify
@pytest.mark.slow
class TestRecovery:
    def test_tv_within_tolerance(self, recovery_report):
        assert recovery_report.passed
        assert recovery_report.max_discrepancy < 0.05

    def test_value_table_tracks_posterior(self, recovery_report):
        assert recovery_report.stats["value_mae"] < 0.1
        assert recovery_report.stats["value_mae"] < recovery_report.stats["value_mae_fixed"]

    def test_value_likelihood_rises_from_half(self, recovery_report):
        stats = recovery_report.stats
        assert stats["geo_first_step"] == pytest.approx(0.5, abs=0.01)
        assert stats["geo_last_epoch"] > stats["geo_first_epoch"]

    def test_clip_rate_is_rare(self, recovery_report):
        assert recovery_report.stats["clip_rate"] < 0.05

    def test_oracle_reported(self, recovery_report):
        assert recovery_report.stats["oracle_within_tolerance"] in (0.0, 1.0)
        assert recovery_report.stats["tv_oracle"] > 0.0

    def test_tv_shrinks_with_more_samples(self, small_world):
        report = recovery_sweep(small_world, LossKind.PIPA_M, recovery_train_config(epochs=20),
                                sizes=(100, 1000, 10_000), seeds=(0, 1, 2))
        assert report.passed
        assert report.stats["tv_n100"] > report.stats["tv_n10000"]

    def test_fixed_value_ablation_reported(self, small_world):
        cfg = recovery_train_config(epochs=5)
        report = recovery_experiment(small_world, LossKind.PIPA_M, 2000, cfg, ablate_value=True)
        assert "tv_fixed_value" in report.stats

    def test_sweep_needs_sizes(self, small_world):
        with pytest.raises(InvalidInputException):
            recovery_sweep(small_world, LossKind.PIPA_M, TrainConfig(), sizes=())


@pytest.mark.verify
@pytest.mark.slow
class TestStepVsAnswer:
    def test_step_dpo_l1_lifts_positive_reward(self):
        world = make_world(seed=3, prompts=2, vocab=3, length=3, correct_prefix_mass=0.8, shared_prefix=True)
        reward, pipa = step_vs_answer_ablation(world, 2000, TrainConfig(lr=0.05, epochs=10))
        assert reward.passed
        assert reward.stats["reward_pos_step_dpo_l1"] > reward.stats["reward_pos_dpo"]
        assert {"tv_step", "tv_answer"} == set(pipa.stats)

    def test_tie_fails(self):
        # no correct prefix: every rejected token is wrong and the two arms coincide
        world = make_world(seed=3, prompts=2, vocab=3, length=3, correct_prefix_mass=0.0)
        reward, _ = step_vs_answer_ablation(world, 300, TrainConfig(lr=0.05, epochs=2), seeds=(0,))
        assert reward.stats["reward_pos_dpo"] == reward.stats["reward_pos_step_dpo_l1"]
        assert not reward.passed

    def test_threshold_sweep_reports_every_threshold(self, step_world):
        cfg = TrainConfig(lr=0.05, batch_size=64, epochs=1)
        report = threshold_sweep(step_world, 200, cfg, thresholds=(-0.5, 0.0, 0.5))
        assert report.passed
        assert {"score_-0.5", "score_0", "score_0.5", "interior_max"} == set(report.stats)

    def test_threshold_sweep_needs_thresholds(self, step_world):
        with pytest.raises(InvalidInputException):
            threshold_sweep(step_world, 10, TrainConfig(), thresholds=())


@pytest.mark.verify
class TestRegistry:
    def test_registered_statistical_checks(self):
        assert {"recovery", "recovery-sweep", "step-vs-answer", "threshold-sweep"} <= set(verify.CHECKS)

    def test_unknown_check(self):
        with pytest.raises(InvalidInputException):
            run_checks(["dpo-equivalence", "nope"], ExperimentConfig())

    def test_runs_in_order(self):
        config = ExperimentConfig(verify=VerifySpec(trials=20))
        reports = run_checks(["kto-equivalence", "dpo-equivalence"], config)
        assert [r.name for r in reports] == ["kto-equivalence", "dpo-equivalence"]

    def test_csv_export(self, tmp_path):
        reports = [
            VerificationReport.evaluate("a", 10, 0.0, 1e-10),
            VerificationReport.evaluate("b", 5, 0.5, 0.05, tv_oracle=0.01),
        ]
        reports_to_csv(reports, tmp_path / "reports.csv")
        with (tmp_path / "reports.csv").open(newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert [r["passed"] for r in rows] == ["true", "false"]
        assert rows[1]["stats"] == "tv_oracle=0.01"

    def test_summary(self):
        reports = [
            VerificationReport.evaluate("a", 10, 0.0, 1e-10),
            VerificationReport.evaluate("b", 5, 0.5, 0.05),
        ]
        lines = summarize(reports).splitlines()
        assert lines[0].startswith("PASS a")
        assert lines[1].startswith("FAIL b")
        assert lines[-1] == "1/2 checks passed"

"""
Numeric verification of the alignment identities and recovery claims.

Algebraic checks (DPO and KTO Bayes forms, gradients, stop-gradient,
reductions) run on seeded random inputs and compare against exact
tolerances. Statistical checks train on synthetic worlds and compare the
result with the world's exact conditionals.
"""

import csv
import math
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pipalab.core.exceptions import InvalidInputException
from pipalab.core.gradengine import check_gradient
from pipalab.core.logger import get_verify_logger, log_operation
from pipalab.core.losses import (
    build_loss,
    clip_counts,
    dpo_loss,
    implicit_reward,
    kto_loss,
    step_dpo_losses,
    step_kto_losses,
    token_terms,
)
from pipalab.core.seqdata import labels_from_q, pair_by_problem, relabel_example
from pipalab.core.synthworld import (
    World,
    answer_distribution,
    make_world,
    marginal_policy,
    negative_policy,
    sample_dataset,
    sample_probe,
    synthesize_q_values,
    value_oracle,
)
from pipalab.core.tabular import (
    ModelBundle,
    TabularPolicy,
    ValueTable,
    fit_sft,
    select_examples,
    sequence_distribution,
    tv_distance,
)
from pipalab.core.trainer import MetricsLog, train
from pipalab.models.models import (
    DataLevel,
    Dataset,
    Example,
    ExperimentConfig,
    LossConfig,
    LossKind,
    OptimizerKind,
    PairedExample,
    PriorMode,
    Selector,
    StepDpoVariant,
    StepKtoVariant,
    TrainConfig,
    VerificationReport,
)

logger = get_verify_logger()

EQUIVALENCE_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-5
REDUCTION_TOLERANCE = 1e-12
RECOVERY_TOLERANCE = 0.05
RECOVERY_SIZES = (100, 1000, 10_000, 50_000)
REWARD_MARGIN = 1e-9
SWEEP_THRESHOLDS = (-0.5, 0.0, 0.5, 0.9)


def recovery_train_config(**update) -> TrainConfig:
    """
    Adam settings that reach the recovery tolerances for PIPA-M and PIPA-N on
    a |X|=4, V=4, T=2 world at N=50,000; ``update`` overrides fields.
    """
    base = dict(optimizer=OptimizerKind.ADAM, lr=0.003, batch_size=256, epochs=40)
    base.update(update)
    return TrainConfig(**base)


# Random fixtures

def random_bundle(rng: np.random.Generator, vocab: int = 3, length: int = 3, window: int = 2,
                  prompts: int = 2, scale: float = 1.0) -> ModelBundle:
    """Bundle with Gaussian logits, raws and prior logits."""
    prompt_list = [(i,) for i in range(prompts)]
    policy = TabularPolicy(vocab, length, window, prompt_list)
    prior = TabularPolicy(vocab, length, window, prompt_list)
    value = ValueTable(vocab, length, window, prompt_list)
    for ctx in policy.contexts():
        policy.logits[ctx] = rng.normal(0.0, scale, vocab)
        prior.logits[ctx] = rng.normal(0.0, scale, vocab)
        value.raw[ctx] = float(rng.normal(0.0, scale))
    prior.frozen = True
    return ModelBundle(policy, value, prior)


def _random_answer(rng: np.random.Generator, vocab: int, length: int) -> Tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(0, vocab, size=length))


def _random_record(rng: np.random.Generator, kind: LossKind, vocab: int, length: int, prompts: int):
    prompt = (int(rng.integers(0, prompts)),)
    if kind.paired:
        chosen = Example(prompt=prompt, answer=_random_answer(rng, vocab, length), labels=(1,) * length)
        labels = tuple(int(c) for c in rng.integers(0, 2, size=length))
        if all(labels):
            labels = labels[:-1] + (0,)
        rejected = Example(prompt=prompt, answer=_random_answer(rng, vocab, length), labels=labels)
        return PairedExample(prompt=prompt, chosen=chosen, rejected=rejected)
    if kind == LossKind.KTO:
        labels = (int(rng.integers(0, 2)),) * length
    else:
        labels = tuple(int(c) for c in rng.integers(0, 2, size=length))
    return Example(prompt=prompt, answer=_random_answer(rng, vocab, length), labels=labels)


def _near_clip(bundle: ModelBundle, record, epsilon: float) -> bool:
    examples = (record.chosen, record.rejected) if isinstance(record, PairedExample) else (record,)
    for example in examples:
        for terms in token_terms(bundle, example, LossKind.PIPA_M, epsilon):
            if abs(terms.f * terms.g / terms.p - 1.0) < 1e-2:
                return True
    return False


# Algebraic checks

def check_dpo_equivalence(seed: int = 0, trials: int = 1000) -> VerificationReport:
    """
    ``dpo_loss`` at beta=1 against the Bayes-form negative log posterior of the
    pair model with p(y|x,c=0) = prior and p(c=1|x) = 1/2. The Bayes side is
    computed from sequence log-probabilities, off the tape.
    """
    rng = np.random.default_rng(seed)
    cfg = LossConfig(kind=LossKind.DPO, beta=1.0)
    worst = 0.0
    for _ in range(trials):
        bundle = random_bundle(rng, scale=2.0)
        pair = _random_record(rng, LossKind.DPO, 3, 3, 2)
        log_a = bundle.policy.sequence_logprob(pair.prompt, pair.chosen.answer)
        log_b = bundle.policy.sequence_logprob(pair.prompt, pair.rejected.answer)
        log_c = bundle.prior.sequence_logprob(pair.prompt, pair.chosen.answer)
        log_d = bundle.prior.sequence_logprob(pair.prompt, pair.rejected.answer)
        bayes = -(log_a + log_d - np.logaddexp(log_a + log_d, log_b + log_c))
        worst = max(worst, abs(dpo_loss(bundle, pair, cfg).value - float(bayes)))
    return VerificationReport.evaluate("dpo-equivalence", trials, worst, EQUIVALENCE_TOLERANCE)


def check_kto_equivalence(seed: int = 0, trials: int = 1000) -> VerificationReport:
    """
    ``kto_loss`` against the Bayes posterior with p(c=0|x)/p(c=1|x) = exp(z),
    for both labels: the loss is minus the posterior of the observed label.
    """
    rng = np.random.default_rng(seed)
    cfg = LossConfig(kind=LossKind.KTO)
    worst = 0.0
    for _ in range(trials):
        bundle = random_bundle(rng, scale=2.0)
        example = _random_record(rng, LossKind.KTO, 3, 3, 2)
        z = float(rng.uniform(0.0, 2.0))
        log_f = bundle.policy.sequence_logprob(example.prompt, example.answer)
        log_p = bundle.prior.sequence_logprob(example.prompt, example.answer)
        positive = 1.0 / (1.0 + math.exp(log_p + z - log_f))
        bayes = positive if example.correct else 1.0 - positive
        worst = max(worst, abs(-kto_loss(bundle, example, z, cfg).value - bayes))
    return VerificationReport.evaluate("kto-equivalence", trials, worst, EQUIVALENCE_TOLERANCE)



def check_gradients(seed: int = 0, trials: int = 100, eps: float = 1e-5,
                    kinds: Optional[Iterable[LossKind]] = None) -> VerificationReport:
    """
    Central differences against backward() for every loss kind.

    PIPA-M draws whose ratio lies within 1e-2 of the clip boundary are redrawn,
    since a central difference straddling the kink is not a derivative.
    """
    rng = np.random.default_rng(seed)
    kinds = list(kinds) if kinds is not None else list(LossKind)
    worst = 0.0
    per_kind: Dict[str, float] = {}
    with log_operation(logger, "gradient check", trials=trials, kinds=len(kinds)):
        for kind in kinds:
            kind_worst = 0.0
            for _ in range(trials):
                while True:
                    bundle = random_bundle(rng, scale=0.5)
                    record = _random_record(rng, kind, 3, 3, 2)
                    cfg = LossConfig(kind=kind, beta=float(rng.uniform(0.1, 1.0)),
                                     sft_coeff=float(rng.choice([0.0, 0.5])), z0=None)
                    if kind != LossKind.PIPA_M or not _near_clip(bundle, record, cfg.epsilon):
                        break
                z = float(rng.uniform(0.0, 1.0))
                probe = build_loss(bundle, record, cfg, z=z)
                params = {key: probe.tape.value(node) for key, node in probe.tape.params.items()}
                error = check_gradient(lambda tape: build_loss(bundle, record, cfg, z=z, tape=tape).node,
                                       params, eps)
                kind_worst = max(kind_worst, error)
            per_kind[f"max_error_{kind.value}"] = kind_worst
            worst = max(worst, kind_worst)
    return VerificationReport.evaluate("gradients", trials * len(kinds), worst, GRADIENT_TOLERANCE, **per_kind)


def _context_keys(bundle: ModelBundle, example: Example, tokens: Iterable[int]) -> set:
    keys = set()
    for t in tokens:
        ctx = bundle.policy.context(example.prompt, example.answer[:t])
        keys.update(("f", ctx, v) for v in range(bundle.policy.vocab_size))
    return keys


def check_stop_gradient(seed: int = 0, trials: int = 100) -> VerificationReport:
    """
    Parameters reached only through correct steps of an incorrect answer get
    exactly zero gradient under Step-DPO-L1 and Step-KTO-L1.
    """
    rng = np.random.default_rng(seed)
    vocab, length = 3, 3
    worst = 0.0
    checked = 0
    cfg = LossConfig(kind=LossKind.STEP_DPO_L1, beta=0.5)
    for _ in range(trials):
        bundle = random_bundle(rng, vocab=vocab, length=length)
        prompt = (int(rng.integers(0, 2)),)

        # Step-DPO-L1: two correct leading steps keep the second context out of y+
        rejected_answer = _random_answer(rng, vocab, length)
        rejected = Example(prompt=prompt, answer=rejected_answer, labels=(1, 1, 0))
        first = (rejected_answer[0] + 1 + int(rng.integers(0, vocab - 1))) % vocab
        chosen = Example(prompt=prompt, answer=(first,) + _random_answer(rng, vocab, length - 1),
                         labels=(1,) * length)
        pair = PairedExample(prompt=prompt, chosen=chosen, rejected=rejected)
        only_positive = _context_keys(bundle, rejected, [0, 1]) - _context_keys(bundle, rejected, [2]) \
            - _context_keys(bundle, chosen, range(length))
        grads = step_dpo_losses(bundle, pair, cfg, StepDpoVariant.L1).backward()
        worst = max([worst] + [abs(grads.get(k, 0.0)) for k in only_positive])
        checked += len(only_positive)

        # Step-KTO-L1 on an incorrect answer with a random changepoint k >= 2
        k = int(rng.integers(2, length + 1))
        labels = tuple(1 if t < k - 1 else 0 for t in range(length))
        negative = Example(prompt=prompt, answer=_random_answer(rng, vocab, length), labels=labels)
        positive_steps = [t for t in range(length) if labels[t] == 1]
        negative_steps = [t for t in range(length) if labels[t] == 0]
        only_positive = _context_keys(bundle, negative, positive_steps) - _context_keys(bundle, negative, negative_steps)
        z0 = float(rng.uniform(0.0, 1.0))
        grads = step_kto_losses(bundle, negative, z0, StepKtoVariant.L1).backward()
        worst = max([worst] + [abs(grads.get(k, 0.0)) for k in only_positive])
        checked += len(only_positive)
    return VerificationReport.evaluate("stop-gradient", trials * 2, worst, 0.0, parameters_checked=checked)


def check_reductions(seed: int = 0, trials: int = 100) -> VerificationReport:
    """Step losses collapse to their answer-level counterparts when masks are vacuous."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig(kind=LossKind.STEP_DPO_L1, beta=0.3)
    worst = 0.0
    vocab, length = 3, 3
    for _ in range(trials):
        bundle = random_bundle(rng, vocab=vocab, length=length)
        prompt = (int(rng.integers(0, 2)),)
        chosen = Example(prompt=prompt, answer=_random_answer(rng, vocab, length), labels=(1,) * length)
        answer = _random_answer(rng, vocab, length)

        wrong = PairedExample(prompt=prompt, chosen=chosen,
                              rejected=Example(prompt=prompt, answer=answer, labels=(0,) * length))
        values = [step_dpo_losses(bundle, wrong, cfg, v).value for v in StepDpoVariant]
        worst = max(worst, max(values) - min(values))

        right = PairedExample(prompt=prompt, chosen=chosen,
                              rejected=Example(prompt=prompt, answer=answer, labels=(1,) * length))
        worst = max(worst, abs(step_dpo_losses(bundle, right, cfg, StepDpoVariant.L1).value
                               - step_dpo_losses(bundle, right, cfg, StepDpoVariant.L_DPO).value))

        z0 = float(rng.uniform(0.0, 1.0))
        for label in (0, 1):
            single = Example(prompt=prompt, answer=answer, labels=(label,) * length, step_starts=(0,))
            worst = max(worst, abs(step_kto_losses(bundle, single, z0, StepKtoVariant.ORIGINAL).value
                                   - kto_loss(bundle, single, z0, cfg).value))
        correct = Example(prompt=prompt, answer=answer, labels=(1,) * length)
        worst = max(worst, abs(step_kto_losses(bundle, correct, z0, StepKtoVariant.L1).value
                               - kto_loss(bundle, correct, z0, cfg).value))
    return VerificationReport.evaluate("reductions", trials, worst, REDUCTION_TOLERANCE)


def check_pipa_m_marginal(seed: int = 0, trials: int = 1000, epsilon: float = 1e-6) -> VerificationReport:
    """
    Implied decomposition f g + (p - f g) = p per token, F within its range
    for both parameterizations, and the rate of negative implied mass.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    violations = tokens = 0
    for _ in range(trials):
        bundle = random_bundle(rng, vocab=3, length=2, window=1, prompts=1, scale=2.0)
        example = Example(prompt=(0,), answer=_random_answer(rng, 3, 2), labels=(1, 1))
        m_terms = token_terms(bundle, example, LossKind.PIPA_M, epsilon)
        n_terms = token_terms(bundle, example, LossKind.PIPA_N, epsilon)
        for m, n in zip(m_terms, n_terms):
            tokens += 1
            implied = m.p - m.f * m.g
            worst = max(worst, abs(m.f * m.g + implied - m.p) / m.p)
            if implied < -epsilon * m.p:
                violations += 1
            if not (0.0 <= m.F <= 1.0 - epsilon) or not (0.0 <= n.F < 1.0):
                worst = max(worst, 1.0)
    rate = violations / tokens if tokens else 0.0
    logger.info(f"Implied negative mass below -eps*p on {violations}/{tokens} tokens (rate {rate:.4f})")
    return VerificationReport.evaluate("pipa-m-marginal", trials, worst, REDUCTION_TOLERANCE, violation_rate=rate)


# Statistical checks

def count_mle_policy(dataset: Dataset, vocab: int, length: int, prompts: Sequence[Tuple[int, ...]],
                     selector: Selector = Selector.POSITIVE) -> TabularPolicy:
    """
    Frozen full-history policy holding the empirical conditional frequencies
    of the selected answers; contexts never observed stay uniform and unseen
    tokens of observed contexts get probability zero.
    """
    counts: Dict[Tuple[int, Tuple[int, ...]], np.ndarray] = {}
    reference = TabularPolicy(vocab, length, length - 1, prompts)
    for example in select_examples(dataset, selector):
        for t, token in enumerate(example.answer):
            ctx = reference.context(example.prompt, example.answer[:t])
            counts.setdefault(ctx, np.zeros(vocab))[token] += 1.0

    def conditional(p: int, tail: Tuple[int, ...]) -> np.ndarray:
        row = counts.get((p, tail))
        return row if row is not None else np.ones(vocab)

    return TabularPolicy.from_conditionals(vocab, length, length - 1, prompts, conditional, frozen=True)


def mean_tv(policy: TabularPolicy, world: World) -> float:
    """TV(policy(.|x), p(.|x, c=1)) averaged uniformly over prompts."""
    distances = [
        tv_distance(sequence_distribution(policy, x, world.length), answer_distribution(world, x, True))
        for x in range(len(world.prompts))
    ]
    return float(np.mean(distances))


def build_prior(world: World, kind: LossKind, mode: PriorMode, dataset: Dataset, window: int,
                selector: Optional[Selector] = None, sft_epochs: int = 300, sft_lr: float = 0.1) -> TabularPolicy:
    """
    Frozen prior for ``kind``: the exact marginal (negative conditional for
    PIPA-N) or an SFT fit on the selected records.
    """
    if PriorMode(mode) == PriorMode.EXACT:
        return negative_policy(world, window) if kind == LossKind.PIPA_N else marginal_policy(world, window)
    if selector is None:
        selector = Selector.NEGATIVE if kind == LossKind.PIPA_N else Selector.ALL
    start = TabularPolicy.uniform(world.vocab_size, world.length, window, world.prompts)
    return fit_sft(start, dataset, selector, sft_epochs, sft_lr)


def value_errors(bundle: ModelBundle, world: World, dataset: Dataset, limit: int = 2000) -> Tuple[float, float]:
    """
    Mean |g - oracle| and mean |0.5 - oracle| over the token prefixes of the
    first ``limit`` records.
    """
    trained = fixed = 0.0
    count = 0
    for example in select_examples(Dataset(records=dataset.records[:limit], level=dataset.level), Selector.ALL):
        for t in range(len(example.answer)):
            prefix = example.answer[:t]
            target = value_oracle(world, example.prompt, prefix, dataset.level)
            trained += abs(bundle.value.probability(example.prompt, prefix) - target)
            fixed += abs(0.5 - target)
            count += 1
    return trained / count, fixed / count


def clip_rate(bundle: ModelBundle, examples: Sequence[Example], epsilon: float,
              kind: LossKind = LossKind.PIPA_M) -> float:
    """Fraction of (example, token) evaluations whose F saturates under ``kind``."""
    clipped = total = 0
    for example in examples:
        c, n = clip_counts(bundle, example, epsilon, kind)
        clipped += c
        total += n
    return clipped / total if total else 0.0


def clip_rate_survey(snapshots: Sequence[ModelBundle], probe: Sequence[Example], epsilon: float = 1e-6,
                     kind: LossKind = LossKind.PIPA_M) -> List[float]:
    """Clip activation rate of each snapshot on a fixed probe set."""
    rates = [clip_rate(bundle, probe, epsilon, kind) for bundle in snapshots]
    for epoch, rate in enumerate(rates):
        logger.debug(f"epoch {epoch} clip rate {rate:.4f}")
    return rates


def _recovery_run(world: World, kind: LossKind, dataset: Dataset, cfg: TrainConfig, seed: int,
                  prior_mode: PriorMode, window: int, keep_snapshots: bool = False
                  ) -> Tuple[ModelBundle, MetricsLog]:
    prior = build_prior(world, kind, prior_mode, dataset, window)
    run_cfg = cfg.model_copy(update={"loss": cfg.loss.model_copy(update={"kind": kind})})
    probe = sample_probe(world, cfg.probe_size, seed)
    return train(ModelBundle.from_prior(prior), dataset, run_cfg, probe=probe, keep_snapshots=keep_snapshots)


def recovery_experiment(world: World, kind: LossKind, n: int, cfg: TrainConfig, seed: int = 0,
                        prior_mode: PriorMode = PriorMode.EXACT, window: Optional[int] = None,
                        ablate_value: bool = False) -> VerificationReport:
    """
    Train on answer-level samples of ``world`` and compare f with the true
    positive conditional.

    The count-based MLE on the same samples is reported as ``tv_oracle``;
    ``oracle_within_tolerance`` is 0 when even that oracle misses the TV
    tolerance, in which case a failed verdict says more about the sample
    than about the loss. Stats also hold the value-table error against the
    exact posterior and the same error for g fixed at 0.5, the clip rate per
    epoch end on the training records, and the geometric value likelihood
    at the first step and per epoch.
    """
    kind = LossKind(kind)
    window = world.length - 1 if window is None else window
    dataset = sample_dataset(world, n, DataLevel.ANSWER, seed)
    with log_operation(logger, "recovery experiment", kind=kind.value, n=n):
        oracle = count_mle_policy(dataset, world.vocab_size, world.length, world.prompts)
        tv_oracle = mean_tv(oracle, world)
        if tv_oracle > RECOVERY_TOLERANCE:
            logger.warning(f"Count MLE oracle TV {tv_oracle:.4f} already exceeds {RECOVERY_TOLERANCE}")
        bundle, log = _recovery_run(world, kind, dataset, cfg, seed, prior_mode, window,
                                    keep_snapshots=kind.has_value_head)

        tv = mean_tv(bundle.policy, world)
        stats = {
            "tv_oracle": tv_oracle,
            "oracle_within_tolerance": float(tv_oracle <= RECOVERY_TOLERANCE),
            "n": float(n),
        }
        if kind.has_value_head:
            value_mae, value_mae_fixed = value_errors(bundle, world, dataset)
            geo = log.epoch_means("value_geo_mean")
            examples = select_examples(Dataset(records=dataset.records[:2000], level=dataset.level), Selector.ALL)
            rates = clip_rate_survey(log.snapshots, examples, cfg.loss.epsilon, kind)
            stats.update({
                "value_mae": value_mae,
                "value_mae_fixed": value_mae_fixed,
                "geo_first_epoch": geo[0],
                "geo_last_epoch": geo[-1],
                "geo_first_step": log.rows[0].value_geo_mean,
                "clip_rate_first_epoch": rates[0],
                "clip_rate": rates[-1],
            })
            logger.info(f"final clip rate {stats['clip_rate']:.4f}")
        if ablate_value:
            fixed_cfg = cfg.model_copy(update={"freeze_value": True})
            fixed_bundle, _ = _recovery_run(world, kind, dataset, fixed_cfg, seed, prior_mode, window)
            stats["tv_fixed_value"] = mean_tv(fixed_bundle.policy, world)
    return VerificationReport.evaluate(f"recovery-{kind.value}", n, tv, RECOVERY_TOLERANCE, **stats)


def recovery_sweep(world: World, kind: LossKind, cfg: TrainConfig, sizes: Sequence[int] = RECOVERY_SIZES,
                   seeds: Sequence[int] = (0, 1, 2, 3, 4), prior_mode: PriorMode = PriorMode.EXACT,
                   window: Optional[int] = None) -> VerificationReport:
    """
    Median recovery TV over ``seeds`` at each sample size, in increasing order
    of size. The discrepancy is the largest rise of the median between
    consecutive sizes, so the report passes when the curve never goes up.
    """
    if not sizes or not seeds:
        raise InvalidInputException("recovery sweep needs sample sizes and seeds", field="sizes")
    kind = LossKind(kind)
    window = world.length - 1 if window is None else window
    medians: List[float] = []
    stats: Dict[str, float] = {}
    with log_operation(logger, "recovery sweep", kind=kind.value, sizes=len(sizes), seeds=len(seeds)):
        for n in sorted(sizes):
            tvs = []
            for seed in seeds:
                dataset = sample_dataset(world, n, DataLevel.ANSWER, seed)
                bundle, _ = _recovery_run(world, kind, dataset, cfg.model_copy(update={"seed": seed}), seed,
                                          prior_mode, window)
                tvs.append(mean_tv(bundle.policy, world))
            medians.append(float(np.median(tvs)))
            stats[f"tv_n{n}"] = medians[-1]
            logger.info(f"N={n}: median TV {medians[-1]:.4f}")
    rise = max([0.0] + [later - earlier for earlier, later in zip(medians, medians[1:])])
    return VerificationReport.evaluate(f"recovery-sweep-{kind.value}", len(sizes) * len(seeds), rise, 0.0, **stats)


def to_answer_level(dataset: Dataset) -> Dataset:
    """Collapse step labels to the answer label of each record."""
    records = [
        Example(prompt=e.prompt, answer=e.answer, labels=(int(e.correct),) * len(e.answer))
        for e in select_examples(dataset, Selector.ALL)
    ]
    return Dataset(records=tuple(records), level=DataLevel.ANSWER)


def step_vs_answer_ablation(world: World, n: int, cfg: TrainConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4)
                            ) -> Tuple[VerificationReport, VerificationReport]:
    """
    DPO against Step-DPO-L1, and answer-level against step-level PIPA-M, on the
    same samples.

    The first report passes when the median final positive-probe reward of
    Step-DPO-L1 exceeds that of DPO by more than ``REWARD_MARGIN``, so a tie
    fails; the second only records TV distances. Probes are fresh draws from
    ``world``, never training records.
    """
    prior = marginal_policy(world)
    rewards = {LossKind.DPO: [], LossKind.STEP_DPO_L1: []}
    tvs = {"step": [], "answer": []}
    with log_operation(logger, "step vs answer ablation", n=n, seeds=len(seeds)):
        for seed in seeds:
            data = sample_dataset(world, n, DataLevel.STEP, seed)
            pairs = pair_by_problem(data, seed)
            probe = sample_probe(world, 2 * cfg.probe_size, seed)
            positives = [e for e in probe if e.correct]
            for kind in rewards:
                run_cfg = cfg.model_copy(update={"seed": seed, "loss": cfg.loss.model_copy(update={"kind": kind})})
                bundle, _ = train(ModelBundle.from_prior(prior), pairs, run_cfg, probe=probe)
                rewards[kind].append(float(np.mean([implicit_reward(bundle, e) for e in positives])))
            pipa_cfg = cfg.model_copy(update={"seed": seed, "loss": cfg.loss.model_copy(update={"kind": LossKind.PIPA_M})})
            for name, source in (("step", data), ("answer", to_answer_level(data))):
                bundle, _ = train(ModelBundle.from_prior(prior), source, pipa_cfg, probe=probe)
                tvs[name].append(mean_tv(bundle.policy, world))

    dpo, l1 = float(np.median(rewards[LossKind.DPO])), float(np.median(rewards[LossKind.STEP_DPO_L1]))
    reward_report = VerificationReport.evaluate(
        "step-vs-answer-reward", len(seeds), dpo - l1, -REWARD_MARGIN,
        reward_pos_dpo=dpo, reward_pos_step_dpo_l1=l1,
    )
    pipa_report = VerificationReport.evaluate(
        "step-vs-answer-pipa", len(seeds), 0.0, 0.0,
        tv_step=float(np.median(tvs["step"])), tv_answer=float(np.median(tvs["answer"])),
    )
    return reward_report, pipa_report


def threshold_sweep(world: World, n: int, cfg: TrainConfig, thresholds: Sequence[float] = SWEEP_THRESHOLDS,
                    seed: int = 0) -> VerificationReport:
    """
    Relabel step-level samples from synthesized Q values at each threshold,
    train PIPA-M and score 1 - mean TV. Reports whether the best threshold is
    interior without asserting which one wins.
    """
    if not thresholds:
        raise InvalidInputException("threshold sweep needs at least one threshold", field="thresholds")
    data = sample_dataset(world, n, DataLevel.STEP, seed)
    prior = marginal_policy(world)
    q_cache = {e: synthesize_q_values(world, e) for e in set(data.records)}
    run_cfg = cfg.model_copy(update={"loss": cfg.loss.model_copy(update={"kind": LossKind.PIPA_M})})
    scores: Dict[str, float] = {}
    ordered: List[float] = []
    for threshold in thresholds:
        relabeled = []
        for e in data.records:
            q = q_cache[e]
            relabeled.append(relabel_example(e, labels_from_q(q, e.correct, threshold)).model_copy(update={"q_values": q}))
        bundle, _ = train(ModelBundle.from_prior(prior), Dataset(records=tuple(relabeled), level=DataLevel.STEP), run_cfg)
        score = 1.0 - mean_tv(bundle.policy, world)
        scores[f"score_{threshold:g}"] = score
        ordered.append(score)
        logger.info(f"threshold {threshold:g}: score {score:.4f}")
    best = int(np.argmax(ordered))
    interior = 1.0 if 0 < best < len(ordered) - 1 else 0.0
    return VerificationReport.evaluate("threshold-sweep", len(thresholds), 0.0, 0.0, interior_max=interior, **scores)


# Registry and export

def _world_from(config: ExperimentConfig) -> World:
    spec = config.world
    return make_world(spec.seed, spec.prompts, spec.vocab, spec.length, spec.correct_prefix_mass, spec.shared_prefix)


CHECKS: Dict[str, Callable[[ExperimentConfig], List[VerificationReport]]] = {
    "dpo-equivalence": lambda c: [check_dpo_equivalence(c.verify.seed, c.verify.trials)],
    "kto-equivalence": lambda c: [check_kto_equivalence(c.verify.seed, c.verify.trials)],
    "gradients": lambda c: [check_gradients(c.verify.seed, min(c.verify.trials, 100))],
    "stop-gradient": lambda c: [check_stop_gradient(c.verify.seed, min(c.verify.trials, 100))],
    "reductions": lambda c: [check_reductions(c.verify.seed, min(c.verify.trials, 100))],
    "pipa-m-marginal": lambda c: [check_pipa_m_marginal(c.verify.seed, c.verify.trials)],
    "recovery": lambda c: [recovery_experiment(_world_from(c), c.train.loss.kind, c.dataset.n, c.train,
                                               c.dataset.seed, c.model.prior_mode, ablate_value=True)],
    "recovery-sweep": lambda c: [recovery_sweep(_world_from(c), c.train.loss.kind, c.train)],
    "step-vs-answer": lambda c: list(step_vs_answer_ablation(_world_from(c), c.dataset.n, c.train)),
    "threshold-sweep": lambda c: [threshold_sweep(_world_from(c), c.dataset.n, c.train, seed=c.dataset.seed)],
}


def run_checks(names: Sequence[str], config: ExperimentConfig) -> List[VerificationReport]:
    """Run registered checks by name, in the given order."""
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise InvalidInputException(f"unknown checks: {', '.join(unknown)}", field="checks", value=unknown)
    reports: List[VerificationReport] = []
    for name in names:
        with log_operation(logger, f"check {name}"):
            reports.extend(CHECKS[name](config))
    return reports


def reports_to_csv(reports: Sequence[VerificationReport], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["name", "trials", "max_discrepancy", "tolerance", "passed", "stats"])
        for report in reports:
            stats = ";".join(f"{k}={v!r}" for k, v in sorted(report.stats.items()))
            writer.writerow([report.name, report.trials, repr(report.max_discrepancy), repr(report.tolerance),
                             "true" if report.passed else "false", stats])


def summarize(reports: Sequence[VerificationReport]) -> str:
    """Human-readable block, one line per report plus a verdict line."""
    lines = []
    for report in reports:
        verdict = "PASS" if report.passed else "FAIL"
        line = f"{verdict} {report.name}: {report.max_discrepancy:.3e} <= {report.tolerance:.3e} ({report.trials} trials)"
        if report.stats:
            line += " | " + " ".join(f"{k}={v:.6g}" for k, v in sorted(report.stats.items()))
        lines.append(line)
    failed = sum(1 for r in reports if not r.passed)
    lines.append(f"{len(reports) - failed}/{len(reports)} checks passed")
    return "\n".join(lines) + "\n"

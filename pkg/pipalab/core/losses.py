"""
Preference-alignment losses as tape expressions over a ModelBundle.

Per token t of an answer y to prompt x:

    f_t = f(y_t | x, y_<t)      trainable policy, log f_t = l[y_t] - logsumexp(l)
    g_t = sigmoid(raw(x, y_<t))  trainable value table
    p_t = prior(y_t | x, y_<t)   frozen prior, a numeric constant
    r_t = log f_t - log p_t      implicit per-token reward

Every loss returns a ``Loss`` (tape plus root node) so several terms can be
combined on one tape before a single backward pass.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from pipalab.config import get_settings
from pipalab.core.exceptions import IncompatibleDatasetException, InvalidInputException, NumericalException
from pipalab.core.gradengine import GradMap, Tape, backward
from pipalab.core.logger import get_loss_logger
from pipalab.core.tabular import ModelBundle, enumerate_sequences
from pipalab.models.models import (
    Example,
    LossConfig,
    LossKind,
    PairedExample,
    Record,
    StepDpoVariant,
    StepKtoVariant,
    ZMode,
)

logger = get_loss_logger()


class Loss(NamedTuple):
    """Scalar loss node on a tape."""

    tape: Tape
    node: int

    @property
    def value(self) -> float:
        return self.tape.value(self.node)

    def backward(self) -> GradMap:
        return backward(self.tape, self.node)


@dataclass(frozen=True)
class TokenTerms:
    """Numeric per-token quantities of one answer."""

    f: float
    g: float
    p: float
    F: float
    r: float


@dataclass
class _TokenNodes:
    log_f: int
    p: float
    log_p: float
    ctx: tuple
    label: int


def _prior_probability(bundle: ModelBundle, example: Example, t: int) -> float:
    p = float(bundle.prior.next_token_dist(example.prompt, example.answer[:t])[example.answer[t]])
    if p < get_settings().UNDERFLOW_FLOOR:
        raise NumericalException(
            f"prior assigns probability {p!r} to token {t} of answer {example.answer}",
            op="prior", value=p,
        )
    return p


def _token_nodes(tape: Tape, bundle: ModelBundle, example: Example) -> List[_TokenNodes]:
    if len(example.answer) > bundle.policy.max_len:
        raise InvalidInputException(f"answer longer than max_len {bundle.policy.max_len}", field="answer")
    out = []
    for t, token in enumerate(example.answer):
        ctx = bundle.policy.context(example.prompt, example.answer[:t])
        row = bundle.policy.register(tape, ctx)
        log_f = tape.sub(row[token], tape.logsumexp(row))
        p = _prior_probability(bundle, example, t)
        out.append(_TokenNodes(log_f, p, math.log(p), ctx, example.labels[t]))
    return out


def _rewards(tape: Tape, tokens: Sequence[_TokenNodes]) -> List[int]:
    return [tape.sub(tok.log_f, tape.constant(tok.log_p)) for tok in tokens]


def _value_nodes(tape: Tape, bundle: ModelBundle, ctx: tuple, train_value: bool) -> Tuple[int, int]:
    """(g, 1 - g) nodes; 1 - g is computed as sigmoid(-raw)."""
    raw = bundle.value.register(tape, ctx, trainable=train_value)
    return tape.sigmoid(raw), tape.sigmoid(tape.neg(raw))


def _label_term(tape: Tape, F: int, label: int) -> int:
    if label == 1:
        return tape.neg(tape.log(F))
    return tape.neg(tape.log(tape.sub(tape.constant(1.0), F)))


def pipa_m_loss(bundle: ModelBundle, example: Example, cfg: LossConfig, tape: Optional[Tape] = None,
                train_value: bool = True) -> Loss:
    """
    Marginal-constrained loss.

    F_t = clip(f_t g_t / p_t, 0, 1 - eps); loss = -sum_{c_t=1} log F_t - sum_{c_t=0} log(1 - F_t).
    """
    tape = tape if tape is not None else Tape()
    terms = []
    for tok in _token_nodes(tape, bundle, example):
        g, _ = _value_nodes(tape, bundle, tok.ctx, train_value)
        ratio = tape.div(tape.mul(tape.exp(tok.log_f), g), tape.constant(tok.p))
        F = tape.clip(ratio, 0.0, 1.0 - cfg.epsilon)
        terms.append(_label_term(tape, F, tok.label))
    return Loss(tape, tape.sum(terms))


def pipa_n_loss(bundle: ModelBundle, example: Example, cfg: LossConfig, tape: Optional[Tape] = None,
                train_value: bool = True) -> Loss:
    """
    Negative-constrained loss.

    F_t = tau(f_t g_t / (p_t (1 - g_t))) with tau(x) = x / (x + 1).
    """
    tape = tape if tape is not None else Tape()
    terms = []
    for tok in _token_nodes(tape, bundle, example):
        g, one_minus_g = _value_nodes(tape, bundle, tok.ctx, train_value)
        numerator = tape.mul(tape.exp(tok.log_f), g)
        denominator = tape.mul(tape.constant(tok.p), one_minus_g)
        F = tape.tau(tape.div(numerator, denominator))
        terms.append(_label_term(tape, F, tok.label))
    return Loss(tape, tape.sum(terms))


def _margin(tape: Tape, bundle: ModelBundle, pair: PairedExample, variant: StepDpoVariant) -> int:
    positive = tape.sum(_rewards(tape, _token_nodes(tape, bundle, pair.chosen)))
    rejected = _token_nodes(tape, bundle, pair.rejected)
    rewards = _rewards(tape, rejected)
    if variant == StepDpoVariant.L_DPO:
        return tape.sub(positive, tape.sum(rewards))
    wrong = tape.sum([r for r, tok in zip(rewards, rejected) if tok.label == 0])
    margin = tape.sub(positive, wrong)
    if variant == StepDpoVariant.L0:
        return margin
    right = tape.sum([r for r, tok in zip(rewards, rejected) if tok.label == 1])
    return tape.sub(margin, tape.stop_gradient(right))


def dpo_loss(bundle: ModelBundle, pair: PairedExample, cfg: LossConfig, tape: Optional[Tape] = None) -> Loss:
    """-log sigmoid(beta * (sum r(y+) - sum r(y-)))."""
    return step_dpo_losses(bundle, pair, cfg, StepDpoVariant.L_DPO, tape)


def ipo_loss(bundle: ModelBundle, pair: PairedExample, cfg: LossConfig, tape: Optional[Tape] = None) -> Loss:
    """(margin - 1/(2 beta))^2."""
    tape = tape if tape is not None else Tape()
    margin = _margin(tape, bundle, pair, StepDpoVariant.L_DPO)
    gap = tape.sub(margin, tape.constant(1.0 / (2.0 * cfg.beta)))
    return Loss(tape, tape.mul(gap, gap))


def step_dpo_losses(bundle: ModelBundle, pair: PairedExample, cfg: LossConfig, variant: StepDpoVariant,
                    tape: Optional[Tape] = None) -> Loss:
    """
    Step-level DPO family.

    L_DPO uses every token of the rejected answer, L0 drops its correct steps
    and L1 keeps them in the forward value behind a stop-gradient.
    """
    tape = tape if tape is not None else Tape()
    margin = _margin(tape, bundle, pair, StepDpoVariant(variant))
    scaled = tape.mul(tape.constant(cfg.beta), margin)
    return Loss(tape, tape.neg(tape.log_sigmoid(scaled)))


def kto_loss(bundle: ModelBundle, example: Example, z: float, cfg: LossConfig,
             tape: Optional[Tape] = None) -> Loss:
    """
    -c sigmoid(F - z) - (1 - c) sigmoid(z - F) with F = sum_t r_t.

    ``z`` enters as a constant and carries no gradient.
    """
    if not example.constant_labels:
        raise InvalidInputException("kto_loss needs an answer-level example", field="labels")
    tape = tape if tape is not None else Tape()
    F = tape.sum(_rewards(tape, _token_nodes(tape, bundle, example)))
    z_node = tape.constant(z)
    if example.labels[0] == 1:
        return Loss(tape, tape.neg(tape.sigmoid(tape.sub(F, z_node))))
    return Loss(tape, tape.neg(tape.sigmoid(tape.sub(z_node, F))))


def step_kto_losses(bundle: ModelBundle, example: Example, z0: float, variant: StepKtoVariant,
                    tape: Optional[Tape] = None) -> Loss:
    """
    Step-level KTO.

    ``original`` sums one sigmoid term per step group around ``z0``. ``L1``
    keeps the KTO term for correct answers; for incorrect answers the correct
    steps enter the forward value behind a stop-gradient.
    """
    tape = tape if tape is not None else Tape()
    tokens = _token_nodes(tape, bundle, example)
    rewards = _rewards(tape, tokens)
    z_node = tape.constant(z0)

    if StepKtoVariant(variant) == StepKtoVariant.ORIGINAL:
        terms = []
        for start, end in example.spans():
            group = tape.sum(rewards[start:end])
            if example.labels[start] == 1:
                terms.append(tape.sigmoid(tape.sub(group, z_node)))
            else:
                terms.append(tape.sigmoid(tape.sub(z_node, group)))
        return Loss(tape, tape.neg(tape.sum(terms)))

    if example.correct:
        return Loss(tape, tape.neg(tape.sigmoid(tape.sub(tape.sum(rewards), z_node))))
    wrong = tape.sum([r for r, tok in zip(rewards, tokens) if tok.label == 0])
    right = tape.sum([r for r, tok in zip(rewards, tokens) if tok.label == 1])
    argument = tape.add(tape.sub(tape.neg(wrong), tape.stop_gradient(right)), z_node)
    return Loss(tape, tape.neg(tape.sigmoid(argument)))


def sft_loss(bundle: ModelBundle, example: Example, tape: Optional[Tape] = None) -> Loss:
    """Negative log-likelihood of correct answers; zero for incorrect ones."""
    tape = tape if tape is not None else Tape()
    if not example.correct:
        return Loss(tape, tape.constant(0.0))
    log_fs = [tok.log_f for tok in _token_nodes(tape, bundle, example)]
    return Loss(tape, tape.neg(tape.sum(log_fs)))


def combined(base: Loss, sft: Loss, sft_coeff: float) -> Loss:
    """base + sft_coeff * sft on the shared tape."""
    if sft_coeff < 0:
        raise InvalidInputException("sft_coeff must be non-negative", field="sft_coeff", value=sft_coeff)
    if sft_coeff == 0.0:
        return base
    if base.tape is not sft.tape:
        raise InvalidInputException("combined terms must live on one tape")
    tape = base.tape
    return Loss(tape, tape.add(base.node, tape.mul(tape.constant(sft_coeff), sft.node)))


def implicit_reward(bundle: ModelBundle, example: Example) -> float:
    """log f(y|x) - log prior(y|x)."""
    return bundle.policy.sequence_logprob(example.prompt, example.answer) - \
        bundle.prior.sequence_logprob(example.prompt, example.answer)


def estimate_kl_z(bundle: ModelBundle, batch: Sequence[Example], mode: ZMode,
                  budget: Optional[int] = None) -> Dict[Tuple[int, ...], float]:
    """
    Reference point z(x) = KL(f(.|x) || prior(.|x)) per prompt of ``batch``.

    Exact mode enumerates every answer of the batch's answer length. Batch
    mode scores record i's prompt against the answer of record (i + 1) mod n,
    averages per prompt and clamps at zero. The result is a plain float.
    """
    if not batch:
        return {}
    if ZMode(mode) == ZMode.EXACT:
        z: Dict[Tuple[int, ...], float] = {}
        lengths: Dict[Tuple[int, ...], int] = {}
        for example in batch:
            lengths[example.prompt] = max(lengths.get(example.prompt, 0), len(example.answer))
        for prompt, length in lengths.items():
            total = 0.0
            for answer, prob in enumerate_sequences(bundle.policy, prompt, length, budget):
                if prob > 0.0:
                    total += prob * (math.log(prob) - bundle.prior.sequence_logprob(prompt, answer))
            z[prompt] = max(0.0, total)
        return z

    n = len(batch)
    if n < 2:
        logger.warning("Batch of one record: KL reference point set to 0")
        return {batch[0].prompt: 0.0}
    sums: Dict[Tuple[int, ...], List[float]] = {}
    for i, example in enumerate(batch):
        other = batch[(i + 1) % n]
        mismatched = Example(prompt=example.prompt, answer=other.answer, labels=other.labels)
        sums.setdefault(example.prompt, []).append(implicit_reward(bundle, mismatched))
    return {prompt: max(0.0, sum(values) / len(values)) for prompt, values in sums.items()}


def token_terms(bundle: ModelBundle, example: Example, kind: LossKind = LossKind.PIPA_M,
                epsilon: float = 1e-6) -> List[TokenTerms]:
    """Numeric f, g, p, F and r per token (F uses the PIPA-M or PIPA-N mapping)."""
    out = []
    for t, token in enumerate(example.answer):
        f = float(bundle.policy.next_token_dist(example.prompt, example.answer[:t])[token])
        g = bundle.value.probability(example.prompt, example.answer[:t])
        p = _prior_probability(bundle, example, t)
        ratio = f * g / p
        if kind == LossKind.PIPA_N:
            odds = ratio / (1.0 - g)
            F = odds / (odds + 1.0)
        else:
            F = min(max(ratio, 0.0), 1.0 - epsilon)
        out.append(TokenTerms(f=f, g=g, p=p, F=F, r=math.log(f) - math.log(p)))
    return out


def implied_negative_mass(bundle: ModelBundle, example: Example) -> List[float]:
    """p_t - f_t g_t: the negative-class mass PIPA-M implies at each token."""
    return [terms.p - terms.f * terms.g for terms in token_terms(bundle, example)]


def clip_counts(bundle: ModelBundle, example: Example, epsilon: float,
                kind: LossKind = LossKind.PIPA_M) -> Tuple[int, int]:
    """
    (saturated tokens, tokens). Under PIPA-M a token saturates when f g / p
    exceeds 1 - eps; under PIPA-N when tau(f g / (p (1 - g))) does.
    """
    if LossKind(kind) == LossKind.PIPA_N:
        terms = token_terms(bundle, example, LossKind.PIPA_N, epsilon)
        return sum(1 for x in terms if x.F > 1.0 - epsilon), len(terms)
    terms = token_terms(bundle, example, LossKind.PIPA_M, epsilon)
    return sum(1 for x in terms if x.f * x.g / x.p > 1.0 - epsilon), len(terms)


def value_geo_mean(bundle: ModelBundle, example: Example) -> float:
    """(prod_t p(c_t | x, y_<t))^(1/T) under the value table."""
    total = 0.0
    for t, label in enumerate(example.labels):
        g = bundle.value.probability(example.prompt, example.answer[:t])
        total += math.log(g if label == 1 else 1.0 - g)
    return math.exp(total / len(example.labels))


def build_loss(bundle: ModelBundle, record: Record, cfg: LossConfig, z: Optional[float] = None,
               tape: Optional[Tape] = None, train_value: bool = True) -> Loss:
    """
    Dispatch ``record`` to the loss named by ``cfg.kind``, adding the SFT term
    when ``cfg.sft_coeff`` is positive.

    Raises:
        IncompatibleDatasetException: If the record kind does not fit the loss
    """
    kind = LossKind(cfg.kind)
    paired = isinstance(record, PairedExample)
    if kind.paired and not paired:
        raise IncompatibleDatasetException(kind.value, "unpaired")
    if not kind.paired and paired:
        raise IncompatibleDatasetException(kind.value, "paired")
    tape = tape if tape is not None else Tape()

    if kind == LossKind.PIPA_M:
        base = pipa_m_loss(bundle, record, cfg, tape, train_value)
    elif kind == LossKind.PIPA_N:
        base = pipa_n_loss(bundle, record, cfg, tape, train_value)
    elif kind == LossKind.DPO:
        base = dpo_loss(bundle, record, cfg, tape)
    elif kind == LossKind.IPO:
        base = ipo_loss(bundle, record, cfg, tape)
    elif kind == LossKind.STEP_DPO_L0:
        base = step_dpo_losses(bundle, record, cfg, StepDpoVariant.L0, tape)
    elif kind == LossKind.STEP_DPO_L1:
        base = step_dpo_losses(bundle, record, cfg, StepDpoVariant.L1, tape)
    elif kind == LossKind.SFT:
        return sft_loss(bundle, record, tape)
    else:
        reference = z if kind == LossKind.KTO or cfg.z0 is None else cfg.z0
        if reference is None:
            raise InvalidInputException(f"{kind.value} needs a reference point z", field="z")
        if kind == LossKind.KTO:
            base = kto_loss(bundle, record, reference, cfg, tape)
        elif kind == LossKind.STEP_KTO:
            base = step_kto_losses(bundle, record, reference, StepKtoVariant.ORIGINAL, tape)
        else:
            base = step_kto_losses(bundle, record, reference, StepKtoVariant.L1, tape)

    if cfg.sft_coeff > 0.0:
        target = record.chosen if paired else record
        return combined(base, sft_loss(bundle, target, tape), cfg.sft_coeff)
    return base

"""
Synthetic worlds with exact Bayes oracles.

A world fixes p(x), p(c=1|x), the answer policies p(y|x,c=1) and
p(y|x,c=0), and a changepoint distribution over {1..T} per prompt. A
negative answer with changepoint k has its tokens before position k labeled
correct and the rest incorrect.
"""

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pipalab.config import get_settings
from pipalab.core.exceptions import (
    InvalidInputException,
    ReportFormatException,
    ResourceLimitException,
    UndefinedPosteriorException,
)
from pipalab.core.logger import get_world_logger
from pipalab.core.tabular import TabularPolicy, policy_from_lines, policy_lines
from pipalab.models.models import DataLevel, Dataset, Example

logger = get_world_logger()

PROBE_SEED_OFFSET = 1_000_003


@dataclass(frozen=True, eq=False)
class World:
    """Ground-truth generative law over (x, c, y, changepoint)."""

    prompt_probs: np.ndarray
    class_prior: np.ndarray
    positive: TabularPolicy
    negative: TabularPolicy
    fault: np.ndarray
    _oracles: Dict[DataLevel, "OracleTable"] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.prompt_probs)
        if self.positive.shape != self.negative.shape:
            raise InvalidInputException("positive and negative policies must share (V, T, w, prompts)")
        if len(self.positive.prompts) != n or len(self.class_prior) != n or self.fault.shape != (n, self.length):
            raise InvalidInputException("world components disagree on the number of prompts or length")
        if abs(float(np.sum(self.prompt_probs)) - 1.0) > 1e-12:
            raise InvalidInputException("prompt distribution must sum to 1", field="prompt_probs")
        if np.any(np.abs(self.fault.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidInputException("fault distributions must sum to 1", field="fault")

    @property
    def vocab_size(self) -> int:
        return self.positive.vocab_size

    @property
    def length(self) -> int:
        return self.positive.max_len

    @property
    def prompts(self) -> Tuple[Tuple[int, ...], ...]:
        return self.positive.prompts

    def oracle(self, level: DataLevel = DataLevel.STEP) -> "OracleTable":
        level = DataLevel(level)
        if level not in self._oracles:
            self._oracles[level] = OracleTable(self, level)
        return self._oracles[level]


def _check_budget(vocab: int, length: int, budget: Optional[int]) -> None:
    budget = budget if budget is not None else get_settings().ENUMERATION_BUDGET
    if vocab ** length > budget:
        raise ResourceLimitException(vocab ** length, budget)


def make_world(seed: int, prompts: int = 4, vocab: int = 4, length: int = 2,
               correct_prefix_mass: Optional[float] = None, shared_prefix: bool = False,
               window: Optional[int] = None, budget: Optional[int] = None) -> World:
    """
    Seeded Dirichlet construction of every component distribution.

    ``correct_prefix_mass`` pins the probability that a negative answer keeps
    at least one correct leading token (changepoint k > 1), spread evenly over
    k = 2..T. ``shared_prefix`` makes the negative policy copy the positive
    policy's rows before the last position, so correct prefixes look alike.
    """
    if prompts < 1 or vocab < 2 or length < 1:
        raise InvalidInputException("world needs prompts >= 1, vocab >= 2, length >= 1")
    _check_budget(vocab, length, budget)
    rng = np.random.default_rng(seed)
    window = length - 1 if window is None else window
    prompt_list = [(i,) for i in range(prompts)]

    prompt_probs = rng.dirichlet(np.ones(prompts))
    prompt_probs = prompt_probs / prompt_probs.sum()
    class_prior = rng.uniform(0.2, 0.8, size=prompts)

    contexts = list(TabularPolicy(vocab, length, window, prompt_list).contexts())
    positive_rows = {ctx: rng.dirichlet(np.ones(vocab)) for ctx in contexts}
    negative_rows = {ctx: rng.dirichlet(np.ones(vocab)) for ctx in contexts}
    if shared_prefix:
        if window < length - 1:
            raise InvalidInputException("shared_prefix needs window >= T - 1", field="window", value=window)
        for ctx in contexts:
            if len(ctx[1]) < length - 1:
                negative_rows[ctx] = positive_rows[ctx]

    fault = rng.dirichlet(np.ones(length), size=prompts)
    if correct_prefix_mass is not None and length > 1:
        spread = correct_prefix_mass / (length - 1)
        fault = np.tile([1.0 - correct_prefix_mass] + [spread] * (length - 1), (prompts, 1))
    elif length == 1:
        fault = np.ones((prompts, 1))
    fault = fault / fault.sum(axis=1, keepdims=True)

    positive = TabularPolicy.from_conditionals(vocab, length, window, prompt_list,
                                               lambda p, tail: positive_rows[(p, tail)])
    negative = TabularPolicy.from_conditionals(vocab, length, window, prompt_list,
                                               lambda p, tail: negative_rows[(p, tail)])
    logger.info(f"Built world seed={seed} |X|={prompts} V={vocab} T={length}")
    return World(prompt_probs, class_prior, positive, negative, fault)


def sample_dataset(world: World, n: int, level: DataLevel, seed: int) -> Dataset:
    """
    Draw ``n`` i.i.d. records (x, c, y) with labels at ``level``.

    Step-level records carry one step per token.
    """
    if n < 1:
        raise InvalidInputException("n must be at least 1", field="n", value=n)
    level = DataLevel(level)
    rng = np.random.default_rng(seed)
    length = world.length
    xs = rng.choice(len(world.prompts), size=n, p=world.prompt_probs)
    cs = rng.random(n) < world.class_prior[xs]
    cdfs = np.cumsum(world.fault, axis=1)
    starts = tuple(range(length)) if level == DataLevel.STEP else None

    records = []
    for x, c in zip(xs, cs):
        policy = world.positive if c else world.negative
        answer = policy.sample(int(x), length, rng)
        if c:
            labels = (1,) * length
        elif level == DataLevel.ANSWER:
            labels = (0,) * length
        else:
            k = int(np.searchsorted(cdfs[x], rng.random() * cdfs[x][-1], side="right")) + 1
            k = min(k, length)
            labels = tuple(1 if t < k - 1 else 0 for t in range(length))
        records.append(Example(prompt=world.prompts[x], answer=answer, labels=labels, step_starts=starts))
    return Dataset(records=tuple(records), level=level)


def sample_probe(world: World, size: int, seed: int) -> List[Example]:
    """Fixed reward probe: a fresh answer-level draw, independent of the training sample of ``seed``."""
    return list(sample_dataset(world, size, DataLevel.ANSWER, seed + PROBE_SEED_OFFSET).records)



class OracleTable:
    """
    Exact posteriors of one world.

    Holds p(y|x,c) for every full answer and answers prefix queries
    P(c_t = 1 | x, y_1..y_L) by summing the joint over completions and
    changepoints.
    """

    def __init__(self, world: World, level: DataLevel):
        self.world = world
        self.level = DataLevel(level)
        length = world.length
        self.answers = list(itertools.product(range(world.vocab_size), repeat=length))
        self.answer_array = np.array(self.answers, dtype=int).reshape(len(self.answers), length)
        self.positive = np.array([
            [math.exp(world.positive.sequence_logprob(x, y)) for y in self.answers]
            for x in range(len(world.prompts))
        ])
        self.negative = np.array([
            [math.exp(world.negative.sequence_logprob(x, y)) for y in self.answers]
            for x in range(len(world.prompts))
        ])
        self._cache: Dict[Tuple[int, Tuple[int, ...], int], float] = {}

    def _survival(self, x: int, t: int) -> float:
        """P(c_t = 1 | c = 0): the changepoint lies after token t."""
        if self.level == DataLevel.ANSWER:
            return 0.0
        return float(self.world.fault[x, t + 1:].sum())

    def answer_posterior(self, x: int, answer: Sequence[int]) -> float:
        index = self.answers.index(tuple(answer))
        p1 = self.world.class_prior[x] * self.positive[x, index]
        p0 = (1.0 - self.world.class_prior[x]) * self.negative[x, index]
        if p1 + p0 == 0.0:
            raise UndefinedPosteriorException(x, tuple(answer))
        return float(p1 / (p1 + p0))

    def label_posterior(self, x: int, prefix: Sequence[int], t: int) -> float:
        prefix = tuple(prefix)
        if not 0 <= t < self.world.length or len(prefix) > self.world.length:
            raise InvalidInputException("token index or prefix outside the answer", field="t", value=t)
        key = (x, prefix, t)
        if key not in self._cache:
            if prefix:
                mask = np.all(self.answer_array[:, :len(prefix)] == np.array(prefix), axis=1)
            else:
                mask = np.ones(len(self.answers), dtype=bool)
            p1 = self.world.class_prior[x] * self.positive[x, mask].sum()
            p0 = (1.0 - self.world.class_prior[x]) * self.negative[x, mask].sum()
            if p1 + p0 == 0.0:
                raise UndefinedPosteriorException(x, prefix)
            self._cache[key] = float((p1 + p0 * self._survival(x, t)) / (p1 + p0))
        return self._cache[key]


def _prompt_index(world: World, x: Union[int, Sequence[int]]) -> int:
    return world.positive.prompt_index(x if isinstance(x, (int, np.integer)) else tuple(x))


def exact_posterior(world: World, x: Union[int, Sequence[int]], y: Sequence[int]) -> float:
    """p(c=1 | x, y) by Bayes' rule."""
    return world.oracle(DataLevel.ANSWER).answer_posterior(_prompt_index(world, x), y)


def label_posterior(world: World, x: Union[int, Sequence[int]], prefix: Sequence[int], t: int,
                    level: DataLevel = DataLevel.STEP) -> float:
    """P(c_t = 1 | x, prefix) for any prefix length."""
    return world.oracle(level).label_posterior(_prompt_index(world, x), prefix, t)


def exact_token_posterior(world: World, x: Union[int, Sequence[int]], y: Sequence[int], t: int) -> float:
    """p(c_t = 1 | x, y_0..y_t) under the changepoint labels."""
    return label_posterior(world, x, tuple(y)[: t + 1], t, DataLevel.STEP)


def value_oracle(world: World, x: Union[int, Sequence[int]], prefix: Sequence[int],
                 level: DataLevel = DataLevel.STEP) -> float:
    """Target of the value table: p(c_t = 1 | x, y_<t) with t = len(prefix)."""
    return label_posterior(world, x, prefix, len(prefix), level)


def _mixture_policy(world: World, weight_positive: np.ndarray, window: Optional[int]) -> TabularPolicy:
    window = world.length - 1 if window is None else window
    if window < world.length - 1:
        raise InvalidInputException("exact priors need window >= T - 1", field="window", value=window)
    oracle = world.oracle(DataLevel.ANSWER)
    vocab = world.vocab_size

    def conditional(x: int, tail: Tuple[int, ...]) -> List[float]:
        depth = len(tail)
        if depth:
            mask = np.all(oracle.answer_array[:, :depth] == np.array(tail), axis=1)
        else:
            mask = np.ones(len(oracle.answers), dtype=bool)
        joint = weight_positive[x] * oracle.positive[x] + (1.0 - weight_positive[x]) * oracle.negative[x]
        probs = [float(joint[mask & (oracle.answer_array[:, depth] == v)].sum()) for v in range(vocab)]
        return probs

    return TabularPolicy.from_conditionals(vocab, world.length, window, world.prompts, conditional, frozen=True)


def marginal_policy(world: World, window: Optional[int] = None) -> TabularPolicy:
    """Frozen p(y | x) = sum_c p(c|x) p(y|x,c)."""
    return _mixture_policy(world, world.class_prior, window)


def positive_policy(world: World, window: Optional[int] = None) -> TabularPolicy:
    """Frozen p(y | x, c=1)."""
    return _mixture_policy(world, np.ones(len(world.prompts)), window)


def negative_policy(world: World, window: Optional[int] = None) -> TabularPolicy:
    """Frozen p(y | x, c=0)."""
    return _mixture_policy(world, np.zeros(len(world.prompts)), window)


def answer_distribution(world: World, x: int, positive: bool = True) -> np.ndarray:
    """p(y | x, c) over all answers in lexicographic order."""
    oracle = world.oracle(DataLevel.ANSWER)
    return (oracle.positive if positive else oracle.negative)[x].copy()


def synthesize_q_values(world: World, example: Example) -> Tuple[float, ...]:
    """2 p(c_t=1 | x, y_<=t) - 1 at the last token of each step."""
    x = _prompt_index(world, example.prompt)
    return tuple(
        max(-1.0, min(1.0, 2.0 * exact_token_posterior(world, x, example.answer, end - 1) - 1.0))
        for _, end in example.spans()
    )


def save_world(world: World, path: Union[str, Path]) -> None:
    """Header with p(x), p(c=1|x) and fault rows, then both policies."""
    def row(values) -> str:
        return ",".join(repr(float(v)) for v in values)

    lines = [
        "# pipalab world",
        "prompt_probs=" + row(world.prompt_probs),
        "class_prior=" + row(world.class_prior),
        "fault=" + ";".join(row(r) for r in world.fault),
        "[positive]",
        *policy_lines(world.positive),
        "[negative]",
        *policy_lines(world.negative),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_world(path: Union[str, Path]) -> World:
    sections: Dict[str, List[str]] = {"header": []}
    current = "header"
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        else:
            sections[current].append(line)
    try:
        header = dict(line.split("=", 1) for line in sections["header"] if "=" in line)
        prompt_probs = np.array([float(v) for v in header["prompt_probs"].split(",")])
        class_prior = np.array([float(v) for v in header["class_prior"].split(",")])
        fault = np.array([[float(v) for v in r.split(",")] for r in header["fault"].split(";")])
        positive = policy_from_lines(sections["positive"], str(path))
        negative = policy_from_lines(sections["negative"], str(path))
    except (KeyError, ValueError) as e:
        raise ReportFormatException(f"Malformed world file: {e}", path=str(path))
    return World(prompt_probs, class_prior, positive, negative, fault)

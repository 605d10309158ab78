"""
Tabular autoregressive models.

A context key is ``(prompt_index, tail)`` where ``tail`` holds the last ``w``
answer tokens. ``TabularPolicy`` keeps one logit row per reachable key and
``ValueTable`` one raw scalar per key; unseen rows stay at zero, which is the
uniform / g=0.5 fallback. ``ModelBundle`` groups the trainable policy, the
value table and the frozen prior.
"""

import itertools
import math
from pathlib import Path
from typing import Callable, Dict, Hashable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from pipalab.config import get_settings
from pipalab.core.exceptions import (
    FrozenModelException,
    InvalidInputException,
    ReportFormatException,
    ResourceLimitException,
)
from pipalab.core.gradengine import Tape
from pipalab.core.logger import get_model_logger, log_operation
from pipalab.core.optim import Adam
from pipalab.models.models import Dataset, Example, PairedExample, Selector

logger = get_model_logger()

Context = Tuple[int, Tuple[int, ...]]
Prompt = Tuple[int, ...]


def softmax(row: np.ndarray) -> np.ndarray:
    """Max-shifted softmax of one logit row."""
    shifted = np.exp(row - np.max(row))
    return shifted / shifted.sum()


class _ContextTable:
    """Shared context keying for policies and value tables."""

    def __init__(self, vocab_size: int, max_len: int, window: int, prompts: Sequence[Prompt]):
        if vocab_size < 1 or max_len < 1 or window < 0:
            raise InvalidInputException("vocab_size and max_len must be positive, window non-negative")
        if not prompts:
            raise InvalidInputException("at least one prompt is required", field="prompts")
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.window = window
        self.prompts: Tuple[Prompt, ...] = tuple(tuple(p) for p in prompts)
        self._prompt_index = {p: i for i, p in enumerate(self.prompts)}
        if len(self._prompt_index) != len(self.prompts):
            raise InvalidInputException("prompts must be distinct", field="prompts")

    @property
    def shape(self) -> Tuple[int, int, int, Tuple[Prompt, ...]]:
        return self.vocab_size, self.max_len, self.window, self.prompts

    def prompt_index(self, prompt: Union[int, Prompt]) -> int:
        if isinstance(prompt, (int, np.integer)):
            if not 0 <= prompt < len(self.prompts):
                raise InvalidInputException(f"unknown prompt id {prompt}", field="prompt", value=int(prompt))
            return int(prompt)
        index = self._prompt_index.get(tuple(prompt))
        if index is None:
            raise InvalidInputException(f"unknown prompt {tuple(prompt)}", field="prompt", value=list(prompt))
        return index

    def context(self, prompt: Union[int, Prompt], prefix: Sequence[int]) -> Context:
        """Context key of the next token after ``prefix``."""
        if len(prefix) >= self.max_len:
            raise InvalidInputException(
                f"prefix length {len(prefix)} must be below max_len {self.max_len}", field="prefix"
            )
        for token in prefix:
            if not 0 <= token < self.vocab_size:
                raise InvalidInputException(f"token {token} outside vocabulary", field="prefix", value=token)
        tail = tuple(prefix[len(prefix) - self.window:]) if self.window and prefix else ()
        return self.prompt_index(prompt), tail

    def contexts(self) -> Iterator[Context]:
        """Every reachable context key, in a fixed order."""
        longest = min(self.window, self.max_len - 1)
        for p in range(len(self.prompts)):
            for length in range(longest + 1):
                for tail in itertools.product(range(self.vocab_size), repeat=length):
                    yield p, tail


class TabularPolicy(_ContextTable):
    """Autoregressive policy with one logit row per context key."""

    def __init__(self, vocab_size: int, max_len: int, window: int, prompts: Sequence[Prompt],
                 logits: Optional[Dict[Context, np.ndarray]] = None, frozen: bool = False):
        super().__init__(vocab_size, max_len, window, prompts)
        self.frozen = frozen
        self.logits: Dict[Context, np.ndarray] = {}
        for ctx in self.contexts():
            row = np.zeros(vocab_size) if logits is None or ctx not in logits else np.asarray(logits[ctx], dtype=float)
            if row.shape != (vocab_size,):
                raise InvalidInputException(f"logit row for {ctx} has shape {row.shape}", field="logits")
            self.logits[ctx] = row.copy()

    @classmethod
    def uniform(cls, vocab_size: int, max_len: int, window: int, prompts: Sequence[Prompt],
                frozen: bool = False) -> "TabularPolicy":
        return cls(vocab_size, max_len, window, prompts, frozen=frozen)

    @classmethod
    def from_conditionals(cls, vocab_size: int, max_len: int, window: int, prompts: Sequence[Prompt],
                          conditional: Callable[[int, Tuple[int, ...]], Sequence[float]],
                          frozen: bool = True) -> "TabularPolicy":
        """Build logits as log-probabilities from ``conditional(prompt_index, tail)``."""
        policy = cls(vocab_size, max_len, window, prompts, frozen=frozen)
        with np.errstate(divide="ignore"):
            for ctx in policy.contexts():
                probs = np.asarray(conditional(*ctx), dtype=float)
                policy.logits[ctx] = np.log(probs / probs.sum())
        return policy

    def copy(self, frozen: Optional[bool] = None) -> "TabularPolicy":
        return TabularPolicy(self.vocab_size, self.max_len, self.window, self.prompts, logits=self.logits,
                             frozen=self.frozen if frozen is None else frozen)

    def next_token_dist(self, prompt: Union[int, Prompt], prefix: Sequence[int]) -> np.ndarray:
        return softmax(self.logits[self.context(prompt, prefix)])

    def token_logprobs(self, prompt: Union[int, Prompt], answer: Sequence[int]) -> List[float]:
        """log f(y_t | x, y_<t) for every t."""
        if not answer or len(answer) > self.max_len:
            raise InvalidInputException(f"answer length must lie in [1, {self.max_len}]", field="answer")
        out = []
        for t, token in enumerate(answer):
            row = self.logits[self.context(prompt, answer[:t])]
            shift = np.max(row)
            out.append(float(row[token] - shift - math.log(np.exp(row - shift).sum())))
        return out

    def sequence_logprob(self, prompt: Union[int, Prompt], answer: Sequence[int]) -> float:
        return float(sum(self.token_logprobs(prompt, answer)))

    def sample(self, prompt: Union[int, Prompt], length: int, rng: np.random.Generator) -> Tuple[int, ...]:
        answer: List[int] = []
        for _ in range(length):
            cdf = np.cumsum(self.next_token_dist(prompt, answer))
            index = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            answer.append(min(index, self.vocab_size - 1))
        return tuple(answer)

    def parameter_keys(self) -> List[Hashable]:
        if self.frozen:
            raise FrozenModelException("register parameters")
        return [("f", ctx, v) for ctx in self.contexts() for v in range(self.vocab_size)]

    def register(self, tape: Tape, ctx: Context, trainable: bool = True) -> List[int]:
        """Logit nodes of one row; constants for frozen or non-trainable use."""
        row = self.logits[ctx]
        if trainable:
            if self.frozen:
                raise FrozenModelException("register parameters")
            return [tape.parameter(("f", ctx, v), float(row[v])) for v in range(self.vocab_size)]
        return [tape.constant(float(x)) for x in row]


class ValueTable(_ContextTable):
    """Per-context raw scalar; g = sigmoid(raw)."""

    def __init__(self, vocab_size: int, max_len: int, window: int, prompts: Sequence[Prompt],
                 raw: Optional[Dict[Context, float]] = None):
        super().__init__(vocab_size, max_len, window, prompts)
        self.raw: Dict[Context, float] = {ctx: float((raw or {}).get(ctx, 0.0)) for ctx in self.contexts()}

    def copy(self) -> "ValueTable":
        return ValueTable(self.vocab_size, self.max_len, self.window, self.prompts, raw=self.raw)

    def probability(self, prompt: Union[int, Prompt], prefix: Sequence[int]) -> float:
        x = self.raw[self.context(prompt, prefix)]
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)

    def parameter_keys(self) -> List[Hashable]:
        return [("g", ctx) for ctx in self.contexts()]

    def register(self, tape: Tape, ctx: Context, trainable: bool = True) -> int:
        if trainable:
            return tape.parameter(("g", ctx), self.raw[ctx])
        return tape.constant(self.raw[ctx])


class ModelBundle:
    """Trainable policy f, trainable value table g and frozen prior."""

    def __init__(self, policy: TabularPolicy, value: ValueTable, prior: TabularPolicy):
        if not (policy.shape == value.shape == prior.shape):
            raise InvalidInputException("policy, value and prior must share (V, T_max, w, prompts)")
        if not prior.frozen:
            raise InvalidInputException("the prior must be frozen", field="prior")
        self.policy = policy
        self.value = value
        self.prior = prior

    @classmethod
    def from_prior(cls, prior: TabularPolicy) -> "ModelBundle":
        """Policy initialized at the prior, value table at raw=0."""
        return cls(prior.copy(frozen=False), ValueTable(*prior.shape), prior)

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.policy.copy(), self.value.copy(), self.prior)

    def trainable_keys(self, include_value: bool = True) -> List[Hashable]:
        keys = self.policy.parameter_keys()
        if include_value:
            keys += self.value.parameter_keys()
        return keys

    def get_param(self, key: Hashable) -> float:
        if key[0] == "f":
            return float(self.policy.logits[key[1]][key[2]])
        return self.value.raw[key[1]]

    def get_vector(self, keys: Sequence[Hashable]) -> np.ndarray:
        return np.array([self.get_param(k) for k in keys], dtype=float)

    def set_vector(self, keys: Sequence[Hashable], vector: np.ndarray) -> None:
        if self.policy.frozen:
            raise FrozenModelException("update parameters")
        for key, x in zip(keys, vector):
            if key[0] == "f":
                self.policy.logits[key[1]][key[2]] = x
            else:
                self.value.raw[key[1]] = float(x)


# Module-level operations

def next_token_dist(policy: TabularPolicy, prompt: Union[int, Prompt], prefix: Sequence[int]) -> np.ndarray:
    return policy.next_token_dist(prompt, prefix)


def sequence_logprob(policy: TabularPolicy, prompt: Union[int, Prompt], answer: Sequence[int]) -> float:
    return policy.sequence_logprob(prompt, answer)


def enumerate_sequences(policy: TabularPolicy, prompt: Union[int, Prompt], length: int,
                        budget: Optional[int] = None) -> List[Tuple[Tuple[int, ...], float]]:
    """
    All answers of ``length`` tokens with their probabilities, lexicographic.

    Raises:
        ResourceLimitException: If V**length exceeds the enumeration budget
    """
    budget = budget if budget is not None else get_settings().ENUMERATION_BUDGET
    requested = policy.vocab_size ** length
    if requested > budget:
        raise ResourceLimitException(requested, budget)
    return [
        (answer, math.exp(policy.sequence_logprob(prompt, answer)))
        for answer in itertools.product(range(policy.vocab_size), repeat=length)
    ]


def sequence_distribution(policy: TabularPolicy, prompt: Union[int, Prompt], length: int,
                          budget: Optional[int] = None) -> np.ndarray:
    """Probabilities of enumerate_sequences as an array."""
    return np.array([p for _, p in enumerate_sequences(policy, prompt, length, budget)])


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) over a common support; terms with p=0 contribute 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    return max(0.0, float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def select_examples(dataset: Dataset, selector: Selector) -> List[Example]:
    """Unpaired examples chosen by correctness; paired records are split first."""
    examples: List[Example] = []
    for record in dataset.records:
        if isinstance(record, PairedExample):
            examples.extend((record.chosen, record.rejected))
        else:
            examples.append(record)
    if selector == Selector.POSITIVE:
        return [e for e in examples if e.correct]
    if selector == Selector.NEGATIVE:
        return [e for e in examples if not e.correct]
    return examples


def fit_sft(policy: TabularPolicy, dataset: Dataset, selector: Selector, epochs: int, lr: float) -> TabularPolicy:
    """
    Maximum-likelihood fit of ``policy`` to the selected answers.

    Token counts are aggregated per context once; each epoch is one
    full-batch Adam step on the mean sequence log-likelihood. Returns a frozen
    copy, leaving ``policy`` untouched.

    Raises:
        InvalidInputException: If the selector matches no example
    """
    examples = select_examples(dataset, selector)
    if not examples:
        raise InvalidInputException(f"selector {selector.value} matched no examples", field="selector")
    if epochs < 1 or lr <= 0:
        raise InvalidInputException("epochs must be >= 1 and lr > 0")

    counts: Dict[Context, np.ndarray] = {}
    for example in examples:
        for t, token in enumerate(example.answer):
            ctx = policy.context(example.prompt, example.answer[:t])
            counts.setdefault(ctx, np.zeros(policy.vocab_size))[token] += 1.0
    contexts = list(counts)
    count_matrix = np.stack([counts[c] for c in contexts])
    totals = count_matrix.sum(axis=1, keepdims=True)
    n = float(len(examples))

    fitted = policy.copy(frozen=False)
    theta = np.stack([fitted.logits[c] for c in contexts]).ravel()
    optimizer = Adam(lr=lr)
    with log_operation(logger, "sft fit", selector=selector.value, examples=len(examples), epochs=epochs):
        for _ in range(epochs):
            logits = theta.reshape(len(contexts), policy.vocab_size)
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs = shifted / shifted.sum(axis=1, keepdims=True)
            # negative mean log-likelihood
            grad = -(count_matrix - totals * probs) / n
            theta = optimizer.step(theta, grad.ravel())
    for ctx, row in zip(contexts, theta.reshape(len(contexts), policy.vocab_size)):
        fitted.logits[ctx] = row.copy()
    return fitted.copy(frozen=True)


# Checkpoints

def policy_lines(policy: TabularPolicy) -> List[str]:
    lines = [
        f"vocab_size={policy.vocab_size}",
        f"max_len={policy.max_len}",
        f"window={policy.window}",
        f"frozen={'true' if policy.frozen else 'false'}",
        "prompts=" + ";".join(",".join(map(str, p)) for p in policy.prompts),
    ]
    for ctx in policy.contexts():
        tail = ",".join(map(str, ctx[1])) or "-"
        lines.append(f"ctx {ctx[0]} {tail} " + " ".join(repr(float(x)) for x in policy.logits[ctx]))
    return lines


def _value_lines(value: ValueTable) -> List[str]:
    lines = [
        f"vocab_size={value.vocab_size}",
        f"max_len={value.max_len}",
        f"window={value.window}",
        "prompts=" + ";".join(",".join(map(str, p)) for p in value.prompts),
    ]
    for ctx in value.contexts():
        tail = ",".join(map(str, ctx[1])) or "-"
        lines.append(f"ctx {ctx[0]} {tail} {value.raw[ctx]!r}")
    return lines


def _parse_table(lines: Sequence[str], source: str) -> Tuple[Dict[str, str], Dict[Context, List[float]]]:
    header: Dict[str, str] = {}
    rows: Dict[Context, List[float]] = {}
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("ctx "):
                _, prompt, tail, *values = line.split()
                key = (int(prompt), () if tail == "-" else tuple(int(t) for t in tail.split(",")))
                rows[key] = [float(v) for v in values]
            else:
                name, value = line.split("=", 1)
                header[name] = value
        except ValueError as e:
            raise ReportFormatException(f"Malformed checkpoint line: {e}", path=source, line=number)
    return header, rows


def _parse_prompts(text: str) -> List[Prompt]:
    return [tuple(int(t) for t in chunk.split(",") if t) for chunk in text.split(";")]


def policy_from_lines(lines: Sequence[str], source: str = "<memory>") -> TabularPolicy:
    header, rows = _parse_table(lines, source)
    try:
        policy = TabularPolicy(
            int(header["vocab_size"]), int(header["max_len"]), int(header["window"]),
            _parse_prompts(header["prompts"]),
            logits={k: np.array(v) for k, v in rows.items()},
            frozen=header.get("frozen", "false") == "true",
        )
    except KeyError as e:
        raise ReportFormatException(f"Checkpoint header missing {e}", path=source)
    return policy


def value_from_lines(lines: Sequence[str], source: str = "<memory>") -> ValueTable:
    header, rows = _parse_table(lines, source)
    try:
        return ValueTable(
            int(header["vocab_size"]), int(header["max_len"]), int(header["window"]),
            _parse_prompts(header["prompts"]),
            raw={k: v[0] for k, v in rows.items()},
        )
    except (KeyError, IndexError) as e:
        raise ReportFormatException(f"Checkpoint header missing {e}", path=source)


def save_policy(policy: TabularPolicy, path: Union[str, Path]) -> None:
    Path(path).write_text("# pipalab policy\n" + "\n".join(policy_lines(policy)) + "\n", encoding="utf-8")


def load_policy(path: Union[str, Path]) -> TabularPolicy:
    return policy_from_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path))


def save_bundle(bundle: ModelBundle, directory: Union[str, Path]) -> None:
    """Write policy.txt, value.txt and prior.txt under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_policy(bundle.policy, directory / "policy.txt")
    save_policy(bundle.prior, directory / "prior.txt")
    (directory / "value.txt").write_text(
        "# pipalab value table\n" + "\n".join(_value_lines(bundle.value)) + "\n", encoding="utf-8"
    )


def load_bundle(directory: Union[str, Path]) -> ModelBundle:
    directory = Path(directory)
    value_path = directory / "value.txt"
    return ModelBundle(
        load_policy(directory / "policy.txt"),
        value_from_lines(value_path.read_text(encoding="utf-8").splitlines(), str(value_path)),
        load_policy(directory / "prior.txt"),
    )

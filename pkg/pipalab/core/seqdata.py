"""
Sequence data operations for the PIPA laboratory.

Pairing and decoupling of preference records, Q-value thresholding into step
labels, step/token label broadcasting, and the line-delimited dataset format.
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from pipalab.core.exceptions import InvalidInputException, ReportFormatException
from pipalab.core.logger import get_data_logger
from pipalab.models.models import DataLevel, Dataset, Example, PairedExample

logger = get_data_logger()


def decouple_pairs(paired: Dataset) -> Dataset:
    """
    Split N preference pairs into 2N unpaired examples.

    All chosen examples come first, then all rejected ones, each class in
    input order. Labels are copied verbatim.

    Raises:
        InvalidInputException: If the dataset is already unpaired
    """
    if paired.records and not paired.paired:
        raise InvalidInputException("decouple_pairs expects paired records", field="records")
    chosen = [pair.chosen for pair in paired.records]
    rejected = [pair.rejected for pair in paired.records]
    return Dataset(records=tuple(chosen + rejected), level=paired.level)


def pair_by_problem(unpaired: Dataset, seed: int) -> Dataset:
    """
    Match correct and incorrect answers of the same prompt.

    Each prompt yields min(#correct, #incorrect) pairs by seeded uniform
    matching; the surplus of either class is discarded. Prompts are visited
    in order of first appearance.
    """
    if unpaired.paired:
        raise InvalidInputException("pair_by_problem expects unpaired records", field="records")

    groups: Dict[Tuple[int, ...], Tuple[List[Example], List[Example]]] = {}
    for record in unpaired.records:
        correct, incorrect = groups.setdefault(record.prompt, ([], []))
        (correct if record.correct else incorrect).append(record)

    rng = np.random.default_rng(seed)
    pairs: List[PairedExample] = []
    dropped = 0
    for prompt, (correct, incorrect) in groups.items():
        n_pairs = min(len(correct), len(incorrect))
        dropped += len(correct) + len(incorrect) - 2 * n_pairs
        if n_pairs == 0:
            continue
        chosen_order = rng.permutation(len(correct))[:n_pairs]
        rejected_order = rng.permutation(len(incorrect))[:n_pairs]
        for i, j in zip(chosen_order, rejected_order):
            pairs.append(
                PairedExample(prompt=prompt, chosen=correct[i], rejected=incorrect[j], pair_id=len(pairs))
            )

    logger.info(f"Formed {len(pairs)} pairs from {len(unpaired)} records ({dropped} unmatched discarded)")
    return Dataset(records=tuple(pairs), level=unpaired.level)


def labels_from_q(q_values: Sequence[float], answer_correct: bool, threshold: float) -> Tuple[int, ...]:
    """
    Convert per-step Q values into step labels.

    Steps of a correct answer are always correct. Inside an incorrect answer a
    step is correct iff its Q value is at least ``threshold``; the boundary
    belongs to the correct interval.
    """
    if not -1.0 < threshold <= 1.0:
        raise InvalidInputException("threshold must lie in (-1, 1]", field="threshold", value=threshold)
    for q in q_values:
        if not math.isfinite(q) or not -1.0 <= q <= 1.0:
            raise InvalidInputException("Q values must be finite and within [-1, 1]", field="q_values", value=q)
    if answer_correct:
        return tuple(1 for _ in q_values)
    return tuple(1 if q >= threshold else 0 for q in q_values)


def _check_starts(step_starts: Sequence[int], length: int) -> None:
    if not step_starts or step_starts[0] != 0:
        raise InvalidInputException("step_starts must begin at 0", field="step_starts", value=list(step_starts))
    for a, b in zip(step_starts, step_starts[1:]):
        if b <= a:
            raise InvalidInputException("step_starts must be strictly increasing", field="step_starts", value=list(step_starts))
    if step_starts[-1] >= length:
        raise InvalidInputException("step_starts out of range", field="step_starts", value=list(step_starts))


def expand_step_labels(step_labels: Sequence[int], step_starts: Sequence[int], length: int) -> Tuple[int, ...]:
    """Broadcast one label per step onto the tokens of that step."""
    _check_starts(step_starts, length)
    if len(step_labels) != len(step_starts):
        raise InvalidInputException("one label per step required", field="step_labels", value=list(step_labels))
    ends = list(step_starts[1:]) + [length]
    tokens: List[int] = []
    for label, start, end in zip(step_labels, step_starts, ends):
        tokens.extend([int(label)] * (end - start))
    return tuple(tokens)


def group_steps(token_labels: Sequence[int], step_starts: Sequence[int]) -> Tuple[int, ...]:
    """Inverse of expand_step_labels: read the label of each step."""
    _check_starts(step_starts, len(token_labels))
    ends = list(step_starts[1:]) + [len(token_labels)]
    grouped = []
    for start, end in zip(step_starts, ends):
        span = set(token_labels[start:end])
        if len(span) != 1:
            raise InvalidInputException(f"labels vary inside step [{start}, {end})", field="token_labels")
        grouped.append(span.pop())
    return tuple(grouped)


def relabel_example(example: Example, step_labels: Sequence[int]) -> Example:
    """Return a copy of ``example`` with new per-step labels."""
    starts = example.step_starts if example.step_starts is not None else tuple(range(len(example.answer)))
    labels = expand_step_labels(step_labels, starts, len(example.answer))
    return example.model_copy(update={"labels": labels})


# Line-delimited format

def _example_line(example: Example, pair_id: Optional[int]) -> Dict:
    line = {
        "prompt": list(example.prompt),
        "answer": list(example.answer),
        "labels": list(example.labels),
        "pair_id": pair_id,
    }
    if example.step_starts is not None:
        line["step_starts"] = list(example.step_starts)
    if example.q_values is not None:
        line["q_values"] = list(example.q_values)
    return line


def dataset_lines(dataset: Dataset) -> List[str]:
    """Canonical JSON lines of a dataset; paired records emit chosen then rejected."""
    lines = []
    for index, record in enumerate(dataset.records):
        if isinstance(record, PairedExample):
            pair_id = record.pair_id if record.pair_id is not None else index
            halves = [_example_line(record.chosen, pair_id), _example_line(record.rejected, pair_id)]
        else:
            halves = [_example_line(record, None)]
        lines.extend(json.dumps(h, sort_keys=True, separators=(",", ":")) for h in halves)
    return lines


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> str:
    """Write a dataset file and return its sha256 digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(line + "\n" for line in dataset_lines(dataset))
    path.write_text(text, encoding="utf-8")
    logger.info(f"Wrote {len(dataset)} records to {path}")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dataset_digest(dataset: Dataset) -> str:
    """sha256 over the canonical file content."""
    text = "".join(line + "\n" for line in dataset_lines(dataset))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_dataset(path: Union[str, Path], level: Optional[DataLevel] = None) -> Dataset:
    """
    Read a dataset file.

    Lines sharing a non-null ``pair_id`` are joined into a PairedExample (the
    first line is the chosen answer). The level is inferred from the labels
    unless given.
    """
    path = Path(path)
    examples: List[Tuple[Example, Optional[int], int]] = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            fields = json.loads(raw)
            example = Example(
                prompt=tuple(fields["prompt"]),
                answer=tuple(fields["answer"]),
                labels=tuple(fields["labels"]),
                step_starts=tuple(fields["step_starts"]) if fields.get("step_starts") is not None else None,
                q_values=tuple(fields["q_values"]) if fields.get("q_values") is not None else None,
            )
        except (ValueError, KeyError, TypeError) as e:
            raise ReportFormatException(f"Invalid dataset record: {e}", path=str(path), line=number)
        examples.append((example, fields.get("pair_id"), number))

    if examples and examples[0][1] is not None:
        if len(examples) % 2:
            raise ReportFormatException("Paired file has an odd number of lines", path=str(path))
        records = []
        for (chosen, pid_a, _), (rejected, pid_b, number) in zip(examples[::2], examples[1::2]):
            if pid_a != pid_b:
                raise ReportFormatException(f"Mismatched pair ids {pid_a} and {pid_b}", path=str(path), line=number)
            try:
                records.append(PairedExample(prompt=chosen.prompt, chosen=chosen, rejected=rejected, pair_id=pid_a))
            except ValidationError as e:
                raise InvalidInputException(f"Invalid pair ending on line {number} of {path}: {e.errors()[0]['msg']}",
                                            field="line", value=number)
        all_examples = [e for e, _, _ in examples]
    else:
        records = [e for e, _, _ in examples]
        all_examples = records

    if level is None:
        level = DataLevel.ANSWER if all(e.constant_labels for e in all_examples) else DataLevel.STEP
        if any(e.step_starts is not None for e in all_examples):
            level = DataLevel.STEP
    return Dataset(records=tuple(records), level=level)

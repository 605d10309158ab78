"""
Mini-batch training loop for the loss zoo.

The batch objective is the mean record loss. Identical records inside a
batch are built once and weighted by their multiplicity. Metrics of a step
are read from the parameters the step starts from.
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pipalab.core.exceptions import IncompatibleDatasetException, InvalidInputException, ReportFormatException
from pipalab.core.logger import get_trainer_logger, log_operation
from pipalab.core.losses import build_loss, clip_counts, estimate_kl_z, implicit_reward, value_geo_mean
from pipalab.core.optim import make_optimizer
from pipalab.core.seqdata import decouple_pairs
from pipalab.core.tabular import ModelBundle
from pipalab.models.models import (
    METRIC_COLUMNS,
    Dataset,
    Example,
    LossKind,
    MetricsRow,
    PairedExample,
    TrainConfig,
)

logger = get_trainer_logger()

_Z_KINDS = (LossKind.KTO, LossKind.STEP_KTO, LossKind.STEP_KTO_L1)
PROBE_HOLDOUT_DIVISOR = 5


class MetricsLog:
    """Append-only per-step metrics with optional epoch-end snapshots."""

    def __init__(self, rows: Optional[Sequence[MetricsRow]] = None):
        self.rows: List[MetricsRow] = list(rows or [])
        self.snapshots: List[ModelBundle] = []

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsLog) and self.rows == other.rows

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.step != self.rows[-1].step + 1:
            raise InvalidInputException("metric rows must be appended in step order", field="step", value=row.step)
        self.rows.append(row)

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(row, name) for row in self.rows]

    def epoch_means(self, name: str) -> List[Optional[float]]:
        """Arithmetic mean of a column per epoch; None where the column is empty."""
        grouped: Dict[int, List[float]] = {}
        for row in self.rows:
            value = getattr(row, name)
            bucket = grouped.setdefault(row.epoch, [])
            if value is not None:
                bucket.append(value)
        return [sum(v) / len(v) if v else None for _, v in sorted(grouped.items())]

    @property
    def final_epoch_loss(self) -> float:
        means = self.epoch_means("loss")
        return means[-1] if means else math.inf

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write the stable columns followed by the epoch index."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(list(METRIC_COLUMNS) + ["epoch"])
            for row in self.rows:
                cells = []
                for name in METRIC_COLUMNS:
                    value = getattr(row, name)
                    cells.append("" if value is None else repr(value) if isinstance(value, float) else str(value))
                writer.writerow(cells + [str(row.epoch)])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "MetricsLog":
        path = Path(path)
        log = cls()
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or tuple(header[: len(METRIC_COLUMNS)]) != METRIC_COLUMNS:
                raise ReportFormatException("metrics header does not match the expected columns", path=str(path), line=1)
            for number, cells in enumerate(reader, start=2):
                if len(cells) != len(header):
                    raise ReportFormatException(f"expected {len(header)} cells, got {len(cells)}", path=str(path), line=number)
                try:
                    values = dict(zip(header, cells))
                    log.rows.append(MetricsRow(
                        step=int(values["step"]),
                        epoch=int(values.get("epoch") or 0),
                        loss=float(values["loss"]),
                        value_geo_mean=float(values["value_geo_mean"]) if values["value_geo_mean"] else None,
                        reward_pos=float(values["reward_pos"]) if values["reward_pos"] else None,
                        reward_neg=float(values["reward_neg"]) if values["reward_neg"] else None,
                        clip_rate=float(values["clip_rate"]),
                    ))
                except ValueError as e:
                    raise ReportFormatException(f"unparseable metrics row: {e}", path=str(path), line=number)
        return log


@dataclass
class GridResult:
    """Outcome of a learning-rate grid search."""

    best_lr: float
    bundle: ModelBundle
    log: MetricsLog
    logs: Dict[float, MetricsLog] = field(default_factory=dict)


def prepare_records(dataset: Dataset, kind: LossKind) -> Dataset:
    """
    Check that ``kind`` can consume ``dataset``; unpaired losses get paired
    data decoupled.
    """
    kind = LossKind(kind)
    if kind.paired and dataset.records and not dataset.paired:
        raise IncompatibleDatasetException(kind.value, "unpaired")
    if not kind.paired and dataset.paired:
        return decouple_pairs(dataset)
    return dataset


def _examples_of(record) -> Tuple[Example, ...]:
    return (record.chosen, record.rejected) if isinstance(record, PairedExample) else (record,)


def split_probe(dataset: Dataset, size: int, seed: int) -> Tuple[List[Example], Dataset]:
    """
    Hold out a seeded set of records as the reward probe.

    At most ``size`` records and never more than a fifth of the dataset are
    held out. Returns the probe examples (both halves of a held-out pair)
    and the remaining training records.
    """
    records = dataset.records
    held = min(size, len(records) // PROBE_HOLDOUT_DIVISOR)
    if held == 0:
        return [], dataset
    rng = np.random.default_rng(seed)
    chosen = {int(i) for i in rng.choice(len(records), size=held, replace=False)}
    probe = [e for i in sorted(chosen) for e in _examples_of(records[i])]
    rest = tuple(r for i, r in enumerate(records) if i not in chosen)
    return probe, Dataset(records=rest, level=dataset.level)


def _rewards(bundle: ModelBundle, probe: Sequence[Example]) -> Tuple[Optional[float], Optional[float]]:
    pos = [implicit_reward(bundle, e) for e in probe if e.correct]
    neg = [implicit_reward(bundle, e) for e in probe if not e.correct]
    return (sum(pos) / len(pos) if pos else None, sum(neg) / len(neg) if neg else None)


def train(bundle: ModelBundle, dataset: Dataset, cfg: TrainConfig, probe: Optional[Sequence[Example]] = None,
          keep_snapshots: bool = False) -> Tuple[ModelBundle, MetricsLog]:
    """
    Optimize the trainable tables of a copy of ``bundle`` on ``dataset``.

    Each step follows the gradient of the batch-mean loss, so ``cfg.lr`` is a
    per-record step size. Without an explicit ``probe`` the reward probe is
    held out of ``dataset`` by ``split_probe`` and never trained on.

    Raises:
        IncompatibleDatasetException: Before any step, if the loss kind
            cannot consume the dataset's records
    """
    kind = LossKind(cfg.loss.kind)
    data = prepare_records(dataset, kind)
    if not data.records:
        raise InvalidInputException("cannot train on an empty dataset", field="dataset")
    bundle = bundle.copy()
    if probe is None:
        probe, data = split_probe(data, cfg.probe_size, cfg.seed)
    probe = list(probe)

    train_value = kind.has_value_head and not cfg.freeze_value
    keys: List[Hashable] = bundle.trainable_keys(include_value=train_value)
    index = {key: i for i, key in enumerate(keys)}
    theta = bundle.get_vector(keys)
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    log = MetricsLog()
    records = data.records
    step = 0

    with log_operation(logger, "training", kind=kind.value, records=len(records), epochs=cfg.epochs, lr=cfg.lr):
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(records))
            for begin in range(0, len(records), cfg.batch_size):
                batch = [records[i] for i in order[begin: begin + cfg.batch_size]]
                counts = Counter(batch)

                z: Dict[Tuple[int, ...], float] = {}
                if kind in _Z_KINDS and (kind == LossKind.KTO or cfg.loss.z0 is None):
                    z = estimate_kl_z(bundle, batch, cfg.loss.z_mode)

                total = 0.0
                grad = np.zeros(len(keys))
                geo: List[float] = []
                clipped = tokens = 0
                for record, count in counts.items():
                    loss = build_loss(bundle, record, cfg.loss, z=z.get(record.prompt), train_value=train_value)
                    total += count * loss.value
                    for key, g in loss.backward().items():
                        position = index.get(key)
                        if position is not None:
                            grad[position] += count * g
                    if kind.has_value_head:
                        geo.extend([value_geo_mean(bundle, record)] * count)
                        c, n = clip_counts(bundle, record, cfg.loss.epsilon, kind)
                        clipped += count * c
                        tokens += count * n

                reward_pos, reward_neg = _rewards(bundle, probe)
                log.append(MetricsRow(
                    step=step,
                    epoch=epoch,
                    loss=total / len(batch),
                    value_geo_mean=sum(geo) / len(geo) if geo else None,
                    reward_pos=reward_pos,
                    reward_neg=reward_neg,
                    clip_rate=clipped / tokens if tokens else 0.0,
                ))
                theta = optimizer.step(theta, grad / len(batch))
                bundle.set_vector(keys, theta)
                step += 1

            if keep_snapshots:
                log.snapshots.append(bundle.copy())
            logger.debug(f"epoch {epoch} mean loss {log.epoch_means('loss')[-1]:.6f}")

    if kind.has_value_head and log.rows and log.rows[-1].clip_rate > 0.05:
        logger.warning(f"Clip activation rate {log.rows[-1].clip_rate:.3f} on the final batch")
    return bundle, log


def grid_search(bundle_factory: Callable[[], ModelBundle], dataset: Dataset, cfg: TrainConfig,
                probe: Optional[Sequence[Example]] = None) -> GridResult:
    """
    One seeded run per grid learning rate; the lowest final-epoch mean loss
    wins, ties going to the smaller learning rate.
    """
    grid = cfg.grid if cfg.grid else [cfg.lr]
    result: Optional[GridResult] = None
    logs: Dict[float, MetricsLog] = {}
    for lr in sorted(grid):
        bundle, log = train(bundle_factory(), dataset, cfg.model_copy(update={"lr": lr, "grid": None}), probe)
        logs[lr] = log
        if result is None or log.final_epoch_loss < result.log.final_epoch_loss:
            result = GridResult(best_lr=lr, bundle=bundle, log=log)
        logger.info(f"grid lr={lr!r} final-epoch loss {log.final_epoch_loss:.6f}")
    result.logs = logs
    return result

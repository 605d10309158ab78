"""
Data models for the PIPA laboratory.

This module defines the Pydantic models used throughout the system: training
records, datasets, loss and training configuration, metric rows, verification
reports and the experiment configuration file schema.
"""

import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from pipalab.config import get_settings


class DataLevel(str, Enum):
    """Granularity of correctness labels."""
    ANSWER = "answer"
    STEP = "step"


class Selector(str, Enum):
    """Which records an SFT fit consumes."""
    POSITIVE = "positive-only"
    ALL = "all"
    NEGATIVE = "negative-only"


class LossKind(str, Enum):
    """Every loss the trainer can optimize."""
    PIPA_M = "pipa-m"
    PIPA_N = "pipa-n"
    DPO = "dpo"
    IPO = "ipo"
    KTO = "kto"
    STEP_DPO_L0 = "step-dpo-l0"
    STEP_DPO_L1 = "step-dpo-l1"
    STEP_KTO = "step-kto"
    STEP_KTO_L1 = "step-kto-l1"
    SFT = "sft"

    @property
    def paired(self) -> bool:
        """Whether the loss consumes PairedExample records."""
        return self in _PAIRED_KINDS

    @property
    def has_value_head(self) -> bool:
        """Whether the loss trains g^θ."""
        return self in (LossKind.PIPA_M, LossKind.PIPA_N)


_PAIRED_KINDS = frozenset({LossKind.DPO, LossKind.IPO, LossKind.STEP_DPO_L0, LossKind.STEP_DPO_L1})


class ZMode(str, Enum):
    """How the KTO reference point z(x) is obtained."""
    EXACT = "exact"
    BATCH = "batch-estimate"


class StepDpoVariant(str, Enum):
    """Generalized Step-DPO losses."""
    L_DPO = "L_DPO"
    L0 = "L0"
    L1 = "L1"


class StepKtoVariant(str, Enum):
    """Step-KTO losses."""
    ORIGINAL = "original"
    L1 = "L1"


class OptimizerKind(str, Enum):
    """First-order optimizers."""
    SGD = "sgd"
    ADAM = "adam"


class PriorMode(str, Enum):
    """Where the frozen prior comes from."""
    SFT = "sft"
    EXACT = "exact"


class Example(BaseModel):
    """
    One (prompt, answer, token-label-vector) record.

    ``step_starts`` partitions the answer into steps; when absent every token
    is its own step. ``q_values`` optionally carries one value per step.
    """

    model_config = ConfigDict(frozen=True)

    prompt: Tuple[int, ...] = Field(..., description="Prompt token sequence")
    answer: Tuple[int, ...] = Field(..., description="Answer token sequence")
    labels: Tuple[int, ...] = Field(..., description="Per-token correctness labels")
    step_starts: Optional[Tuple[int, ...]] = Field(None, description="Start index of each step")
    q_values: Optional[Tuple[float, ...]] = Field(None, description="Per-step Q values in [-1, 1]")

    @field_validator("answer")
    @classmethod
    def validate_answer(cls, v):
        """Answers are non-empty."""
        if not v:
            raise ValueError("answer must be non-empty")
        return v

    @field_validator("labels")
    @classmethod
    def validate_labels(cls, v):
        """Labels are binary."""
        if any(c not in (0, 1) for c in v):
            raise ValueError("labels must be 0/1")
        return v

    @model_validator(mode="after")
    def validate_layout(self):
        """Labels match the answer and are constant within each step."""
        if len(self.labels) != len(self.answer):
            raise ValueError(f"labels length {len(self.labels)} != answer length {len(self.answer)}")
        if self.step_starts is not None:
            starts = self.step_starts
            if not starts or starts[0] != 0:
                raise ValueError("step_starts must begin at 0")
            if any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= len(self.answer):
                raise ValueError("step_starts must be strictly increasing and below the answer length")
            for start, end in self.spans():
                if len(set(self.labels[start:end])) != 1:
                    raise ValueError(f"labels vary inside step [{start}, {end})")
        if self.q_values is not None and len(self.q_values) != len(self.spans()):
            raise ValueError("q_values must carry one value per step")
        return self

    def spans(self) -> List[Tuple[int, int]]:
        """Half-open token spans of the steps."""
        starts = self.step_starts if self.step_starts is not None else tuple(range(len(self.answer)))
        ends = tuple(starts[1:]) + (len(self.answer),)
        return list(zip(starts, ends))

    @property
    def correct(self) -> bool:
        """An answer is correct iff every token is labeled 1."""
        return all(self.labels)

    @property
    def constant_labels(self) -> bool:
        return len(set(self.labels)) == 1


class PairedExample(BaseModel):
    """A chosen/rejected pair sharing one prompt."""

    model_config = ConfigDict(frozen=True)

    prompt: Tuple[int, ...] = Field(..., description="Prompt token sequence")
    chosen: Example = Field(..., description="Chosen answer, all labels 1")
    rejected: Example = Field(..., description="Rejected answer with its labels")
    pair_id: Optional[int] = Field(None, description="Pair identifier in dataset files")

    @model_validator(mode="after")
    def validate_pair(self):
        """Chosen is all-ones and both halves share the prompt."""
        if not self.chosen.correct:
            raise ValueError("chosen labels must all be 1")
        if self.chosen.prompt != self.prompt or self.rejected.prompt != self.prompt:
            raise ValueError("chosen and rejected must share the pair prompt")
        return self


Record = Union[Example, PairedExample]


class Dataset(BaseModel):
    """
    An ordered, homogeneous collection of records.

    Answer-level datasets carry constant label vectors; step-level datasets
    may mix labels inside an answer.
    """

    model_config = ConfigDict(frozen=True)

    records: Tuple[Record, ...] = Field(default_factory=tuple, description="Ordered records")
    level: DataLevel = Field(DataLevel.ANSWER, description="Label granularity")

    @model_validator(mode="after")
    def validate_records(self):
        """Records are all of one kind and consistent with the level flag."""
        kinds = {type(r) for r in self.records}
        if len(kinds) > 1:
            raise ValueError("dataset mixes paired and unpaired records")
        if self.level == DataLevel.ANSWER:
            for record in self.records:
                halves = (record.chosen, record.rejected) if isinstance(record, PairedExample) else (record,)
                if not all(h.constant_labels for h in halves):
                    raise ValueError("answer-level datasets require constant label vectors")
        return self

    @property
    def paired(self) -> bool:
        return bool(self.records) and isinstance(self.records[0], PairedExample)

    def __len__(self) -> int:
        return len(self.records)


class LossConfig(BaseModel):
    """Loss selection and hyperparameters."""

    kind: LossKind = Field(LossKind.PIPA_M, description="Loss kind")
    beta: float = Field(default_factory=lambda: get_settings().DEFAULT_BETA, gt=0.0, description="DPO/IPO temperature")
    epsilon: float = Field(default_factory=lambda: get_settings().DEFAULT_EPSILON, description="PIPA-M clip margin")
    sft_coeff: float = Field(0.0, ge=0.0, description="Weight of the additional SFT term")
    z_mode: ZMode = Field(ZMode.BATCH, description="KTO reference point estimation")
    z0: Optional[float] = Field(None, description="Fixed Step-KTO reference point, batch estimate when unset")

    @field_validator("epsilon")
    @classmethod
    def validate_epsilon(cls, v):
        """Clip margin lies in (0, 1e-3)."""
        if not 0.0 < v < 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3)")
        return v


class TrainConfig(BaseModel):
    """
    Mini-batch optimization settings.

    Gradients are averaged over the records of a batch, so ``lr`` does not
    scale with ``batch_size``; a larger batch takes fewer steps per epoch.
    ``pipalab.core.verify.recovery_train_config`` returns settings that reach
    the recovery tolerances.
    """

    loss: LossConfig = Field(default_factory=LossConfig, description="Loss configuration")
    optimizer: OptimizerKind = Field(OptimizerKind.ADAM, description="Optimizer")
    lr: float = Field(0.05, ge=0.0, description="Learning rate applied to the batch-mean gradient")
    batch_size: int = Field(256, ge=1, description="Records per batch")
    epochs: int = Field(1, ge=1, description="Passes over the dataset")
    seed: int = Field(0, description="Shuffling seed")
    grid: Optional[List[float]] = Field(None, description="Learning rates for grid search")
    adam_beta1: float = Field(0.9, description="Adam first-moment decay")
    adam_beta2: float = Field(0.999, description="Adam second-moment decay")
    adam_eps: float = Field(1e-8, description="Adam denominator guard")
    freeze_value: bool = Field(False, description="Hold g at 0.5 (fixed-value ablation)")
    probe_size: int = Field(64, ge=1, description="Records in the fixed held-out reward probe batch")

    @field_validator("grid", mode="before")
    @classmethod
    def parse_grid(cls, v):
        """Accept comma-separated strings from flat configuration files."""
        if isinstance(v, str):
            v = [float(item) for item in v.split(",") if item.strip()]
        return v

    @model_validator(mode="after")
    def validate_lr(self):
        """lr > 0 unless the run is a deliberate no-op probe."""
        if self.lr < 0 or math.isnan(self.lr):
            raise ValueError("lr must be non-negative")
        if self.grid is not None and any(lr <= 0 for lr in self.grid):
            raise ValueError("grid learning rates must be positive")
        return self


class MetricsRow(BaseModel):
    """One optimization step of a training run."""

    step: int = Field(..., description="Global optimization step")
    epoch: int = Field(..., description="Epoch index")
    loss: float = Field(..., description="Mean loss over the batch")
    value_geo_mean: Optional[float] = Field(None, description="Mean per-example geometric value likelihood")
    reward_pos: Optional[float] = Field(None, description="Mean implicit reward on correct probe answers")
    reward_neg: Optional[float] = Field(None, description="Mean implicit reward on incorrect probe answers")
    clip_rate: float = Field(0.0, description="Fraction of tokens whose F saturates at 1 - eps under the run's PIPA mapping")


METRIC_COLUMNS = ("step", "loss", "value_geo_mean", "reward_pos", "reward_neg", "clip_rate")


class VerificationReport(BaseModel):
    """Outcome of one verification check."""

    name: str = Field(..., description="Check name")
    trials: int = Field(..., ge=0, description="Trials evaluated")
    max_discrepancy: float = Field(..., description="Largest observed discrepancy")
    tolerance: float = Field(..., description="Pass threshold")
    passed: bool = Field(..., description="discrepancy <= tolerance")
    stats: Dict[str, float] = Field(default_factory=dict, description="Auxiliary statistics")

    @model_validator(mode="after")
    def validate_verdict(self):
        """The verdict follows from the numbers."""
        expected = self.max_discrepancy <= self.tolerance
        if self.passed != expected:
            raise ValueError("passed must equal max_discrepancy <= tolerance")
        return self

    @classmethod
    def evaluate(cls, name: str, trials: int, discrepancy: float, tolerance: float, **stats: float) -> "VerificationReport":
        """Build a report, deciding the verdict from the numbers."""
        discrepancy = float(discrepancy)
        return cls(
            name=name,
            trials=trials,
            max_discrepancy=discrepancy,
            tolerance=tolerance,
            passed=not math.isnan(discrepancy) and discrepancy <= tolerance,
            stats={k: float(v) for k, v in stats.items()},
        )


class WorldSpec(BaseModel):
    """Synthetic world construction."""

    seed: int = Field(0, description="World seed")
    prompts: int = Field(4, ge=1, description="|X|")
    vocab: int = Field(4, ge=2, description="Answer vocabulary size V")
    length: int = Field(2, ge=1, description="Answer length T")
    correct_prefix_mass: Optional[float] = Field(None, ge=0.0, le=1.0, description="Pinned share of negatives keeping a correct prefix")
    shared_prefix: bool = Field(False, description="Negatives share the positive policy before the last position")


class DatasetSpec(BaseModel):
    """Dataset sampling."""

    n: int = Field(1000, ge=1, description="Number of samples")
    level: DataLevel = Field(DataLevel.ANSWER, description="Label granularity")
    pairing: bool = Field(False, description="Also write a paired dataset")
    seed: int = Field(0, description="Sampling seed")
    q_threshold: Optional[float] = Field(None, gt=-1.0, le=1.0, description="Relabel steps from synthesized Q values")


class ModelSpec(BaseModel):
    """Tabular model construction."""

    window: int = Field(default_factory=lambda: get_settings().DEFAULT_CONTEXT_WINDOW, ge=0, description="Context window w")
    init_seed: int = Field(0, description="Initialization seed")
    init_noise: float = Field(0.0, ge=0.0, description="Std of Gaussian noise added to the policy logits at init")
    prior_mode: PriorMode = Field(PriorMode.SFT, description="SFT-fitted or exact prior")
    prior_selector: Optional[Selector] = Field(None, description="Records used to fit the prior; negatives for PIPA-N, all otherwise")
    sft_epochs: int = Field(300, ge=1, description="SFT full-batch steps")
    sft_lr: float = Field(0.1, gt=0.0, description="SFT learning rate")


class VerifySpec(BaseModel):
    """Verification toggles."""

    checks: List[str] = Field(default_factory=lambda: ["dpo-equivalence", "kto-equivalence"], description="Checks to run")
    seed: int = Field(0, description="Verification seed")
    trials: int = Field(1000, ge=1, description="Trials per algebraic check")

    @field_validator("checks", mode="before")
    @classmethod
    def parse_checks(cls, v):
        """Accept comma-separated strings from flat configuration files."""
        if isinstance(v, str):
            v = [item.strip() for item in v.split(",") if item.strip()]
        return v


class ExperimentConfig(BaseModel):
    """
    Full experiment description.

    Serialized as a flat ``dotted.key=value`` file; ``from_flat`` and
    ``to_flat`` round-trip losslessly.
    """

    world: WorldSpec = Field(default_factory=WorldSpec)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    verify: VerifySpec = Field(default_factory=VerifySpec)
    output_dir: Optional[str] = Field(None, description="Artifact directory, PIPALAB_OUTPUT_DIR when unset")

    @classmethod
    def from_flat(cls, flat: Dict[str, Optional[str]]) -> "ExperimentConfig":
        """Build a config from dotted keys."""
        nested: Dict[str, Any] = {}
        for key, value in flat.items():
            if value is None or value == "":
                continue
            node = nested
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return cls.model_validate(nested)

    def to_flat(self) -> Dict[str, str]:
        """Flatten to dotted keys with string values, sorted by key."""
        flat: Dict[str, str] = {}

        def walk(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for k, v in value.items():
                    walk(f"{prefix}.{k}" if prefix else k, v)
            elif value is None:
                return
            elif isinstance(value, list):
                flat[prefix] = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                flat[prefix] = "true" if value else "false"
            elif isinstance(value, float):
                flat[prefix] = repr(value)
            else:
                flat[prefix] = str(value)

        walk("", self.model_dump(mode="json"))
        return dict(sorted(flat.items()))

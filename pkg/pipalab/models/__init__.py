"""
Data models for the PIPA laboratory.

Pydantic models for records, datasets, loss and training configuration,
metric rows, verification reports and the experiment configuration file.
"""

from .models import (
    DataLevel, Selector, LossKind, ZMode, StepDpoVariant, StepKtoVariant, OptimizerKind, PriorMode,
    Example, PairedExample, Record, Dataset, LossConfig, TrainConfig, MetricsRow, METRIC_COLUMNS,
    VerificationReport, WorldSpec, DatasetSpec, ModelSpec, VerifySpec, ExperimentConfig
)

__all__ = [
    "DataLevel",
    "Selector",
    "LossKind",
    "ZMode",
    "StepDpoVariant",
    "StepKtoVariant",
    "OptimizerKind",
    "PriorMode",
    "Example",
    "PairedExample",
    "Record",
    "Dataset",
    "LossConfig",
    "TrainConfig",
    "MetricsRow",
    "METRIC_COLUMNS",
    "VerificationReport",
    "WorldSpec",
    "DatasetSpec",
    "ModelSpec",
    "VerifySpec",
    "ExperimentConfig",
]

"""
Core components of the PIPA laboratory.

Autodiff tape, tabular models, losses, synthetic worlds, the trainer,
verification, reporting, logging and exception handling.
"""

from .exceptions import (
    PipaLabException, InvalidInputException, IncompatibleDatasetException, NumericalException,
    DomainException, UndefinedPosteriorException, ResourceLimitException, FrozenModelException,
    ConfigurationException, MissingArtifactException, ReportFormatException, CheckFailedException,
    get_exit_code
)
from .gradengine import Tape, backward, check_gradient, stop_gradient
from .logger import get_logger, log_operation, setup_logging
from .losses import build_loss
from .tabular import ModelBundle, TabularPolicy, ValueTable
from .synthworld import World, make_world, sample_dataset
from .trainer import MetricsLog, grid_search, train

__all__ = [
    "PipaLabException",
    "InvalidInputException",
    "IncompatibleDatasetException",
    "NumericalException",
    "DomainException",
    "UndefinedPosteriorException",
    "ResourceLimitException",
    "FrozenModelException",
    "ConfigurationException",
    "MissingArtifactException",
    "ReportFormatException",
    "CheckFailedException",
    "get_exit_code",
    "Tape",
    "backward",
    "check_gradient",
    "stop_gradient",
    "get_logger",
    "log_operation",
    "setup_logging",
    "build_loss",
    "ModelBundle",
    "TabularPolicy",
    "ValueTable",
    "World",
    "make_world",
    "sample_dataset",
    "MetricsLog",
    "grid_search",
    "train",
]

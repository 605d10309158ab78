"""
PIPA laboratory.

A desk-scale preference-alignment lab: tabular autoregressive policies, a
scalar reverse-mode tape, the PIPA-M / PIPA-N losses next to DPO, IPO, KTO,
Step-DPO, Step-KTO and SFT, synthetic worlds with exact oracles, a trainer,
numeric verification and a command-line front door.
"""

__version__ = "0.1.0"
__description__ = "Desk-scale preference-alignment laboratory"

from .config import get_settings
from .core.exceptions import PipaLabException, get_exit_code
from .core.logger import get_logger, log_operation, setup_logging
from .core.tabular import ModelBundle, TabularPolicy, ValueTable
from .core.trainer import MetricsLog, grid_search, train
from .main import main
from .models.models import (
    DataLevel, Dataset, Example, ExperimentConfig, LossConfig, LossKind, PairedExample,
    TrainConfig, VerificationReport
)

__all__ = [
    "__version__",
    "__description__",
    "get_settings",
    "PipaLabException",
    "get_exit_code",
    "get_logger",
    "log_operation",
    "setup_logging",
    "ModelBundle",
    "TabularPolicy",
    "ValueTable",
    "MetricsLog",
    "grid_search",
    "train",
    "main",
    "DataLevel",
    "Dataset",
    "Example",
    "ExperimentConfig",
    "LossConfig",
    "LossKind",
    "PairedExample",
    "TrainConfig",
    "VerificationReport",
]

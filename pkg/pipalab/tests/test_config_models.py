"""
Tests for settings, data models, exceptions and logging.
"""

import logging

import pytest
from pydantic import ValidationError

from pipalab.config import Settings, get_settings, reset_settings
from pipalab.core.exceptions import (
    CheckFailedException,
    ConfigurationException,
    DomainException,
    IncompatibleDatasetException,
    InvalidInputException,
    MissingArtifactException,
    NumericalException,
    PipaLabException,
    get_exit_code,
)
from pipalab.core.logger import get_logger, log_operation, setup_logging
from pipalab.models.models import (
    DataLevel,
    Dataset,
    Example,
    ExperimentConfig,
    LossConfig,
    LossKind,
    PairedExample,
    TrainConfig,
    VerificationReport,
)


@pytest.mark.unit
class TestSettings:
    """Process-wide settings."""

    def test_defaults(self, settings):
        assert settings.LOG_LEVEL == "INFO"
        assert settings.ENUMERATION_BUDGET == 10**6
        assert settings.DEFAULT_BETA == 0.1
        assert settings.DEFAULT_EPSILON == 1e-6
        assert settings.DEFAULT_CONTEXT_WINDOW == 2

    def test_environment_prefix(self, monkeypatch):
        monkeypatch.setenv("PIPALAB_LOG_LEVEL", "debug")
        monkeypatch.setenv("PIPALAB_ENUMERATION_BUDGET", "500")
        reset_settings()
        settings = get_settings()
        assert settings.LOG_LEVEL == "DEBUG"
        assert settings.ENUMERATION_BUDGET == 500

    def test_invalid_level_rejected(self, monkeypatch):
        monkeypatch.setenv("PIPALAB_LOG_LEVEL", "LOUD")
        reset_settings()
        with pytest.raises(ValidationError):
            get_settings()

    def test_settings_feed_model_defaults(self, monkeypatch):
        monkeypatch.setenv("PIPALAB_DEFAULT_BETA", "0.5")
        reset_settings()
        assert LossConfig().beta == 0.5


@pytest.mark.unit
class TestRecords:
    """Example, PairedExample and Dataset validation."""

    def test_correct_iff_all_ones(self):
        assert Example(prompt=(0,), answer=(1, 2), labels=(1, 1)).correct
        assert not Example(prompt=(0,), answer=(1, 2), labels=(1, 0)).correct

    def test_label_length_must_match(self):
        with pytest.raises(ValidationError):
            Example(prompt=(0,), answer=(1, 2), labels=(1,))

    def test_empty_answer_rejected(self):
        with pytest.raises(ValidationError):
            Example(prompt=(0,), answer=(), labels=())

    def test_labels_constant_within_step(self):
        with pytest.raises(ValidationError):
            Example(prompt=(0,), answer=(0, 1, 2), labels=(1, 0, 0), step_starts=(0, 2))
        example = Example(prompt=(0,), answer=(0, 1, 2), labels=(1, 1, 0), step_starts=(0, 2))
        assert example.spans() == [(0, 2), (2, 3)]

    def test_default_spans_are_tokens(self):
        example = Example(prompt=(0,), answer=(0, 1, 2), labels=(1, 1, 0))
        assert example.spans() == [(0, 1), (1, 2), (2, 3)]

    def test_pair_requires_correct_chosen(self):
        bad = Example(prompt=(0,), answer=(1,), labels=(0,))
        with pytest.raises(ValidationError):
            PairedExample(prompt=(0,), chosen=bad, rejected=bad)

    def test_answer_level_rejects_mixed_labels(self):
        mixed = Example(prompt=(0,), answer=(0, 1), labels=(1, 0))
        with pytest.raises(ValidationError):
            Dataset(records=(mixed,), level=DataLevel.ANSWER)
        assert len(Dataset(records=(mixed,), level=DataLevel.STEP)) == 1


@pytest.mark.unit
class TestConfigs:
    """Loss, training and experiment configuration."""

    def test_loss_kind_flags(self):
        assert LossKind.DPO.paired and LossKind.STEP_DPO_L1.paired
        assert not LossKind.KTO.paired
        assert LossKind.PIPA_M.has_value_head and LossKind.PIPA_N.has_value_head
        assert not LossKind.DPO.has_value_head

    @pytest.mark.parametrize("epsilon", [0.0, 1e-3, -1e-6])
    def test_epsilon_range(self, epsilon):
        with pytest.raises(ValidationError):
            LossConfig(epsilon=epsilon)

    def test_beta_positive(self):
        with pytest.raises(ValidationError):
            LossConfig(beta=0.0)

    def test_grid_parsed_from_string(self):
        cfg = TrainConfig(grid="0.01, 0.1")
        assert cfg.grid == [0.01, 0.1]

    def test_flat_round_trip(self):
        flat = {
            "world.seed": "3",
            "world.vocab": "3",
            "dataset.n": "200",
            "dataset.level": "step",
            "train.loss.kind": "step-dpo-l1",
            "train.loss.beta": "0.2",
            "train.grid": "0.01,0.1",
            "verify.checks": "reductions,gradients",
            "output_dir": "runs/x",
        }
        config = ExperimentConfig.from_flat(flat)
        assert config.world.vocab == 3
        assert config.dataset.level == DataLevel.STEP
        assert config.train.loss.kind == LossKind.STEP_DPO_L1
        assert config.verify.checks == ["reductions", "gradients"]
        assert ExperimentConfig.from_flat(config.to_flat()) == config

    def test_unknown_loss_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.from_flat({"train.loss.kind": "ppo"})


@pytest.mark.unit
class TestVerificationReport:
    def test_verdict_from_numbers(self):
        assert VerificationReport.evaluate("x", 3, 1e-12, 1e-10).passed
        assert not VerificationReport.evaluate("x", 3, 1e-8, 1e-10).passed
        assert not VerificationReport.evaluate("x", 3, float("nan"), 1.0).passed

    def test_inconsistent_verdict_rejected(self):
        with pytest.raises(ValidationError):
            VerificationReport(name="x", trials=1, max_discrepancy=1.0, tolerance=0.0, passed=True)


@pytest.mark.exceptions
class TestExceptions:
    """Exception hierarchy and exit codes."""

    def test_hierarchy(self):
        assert issubclass(DomainException, NumericalException)
        assert issubclass(MissingArtifactException, ConfigurationException)
        assert issubclass(InvalidInputException, PipaLabException)

    @pytest.mark.parametrize("exception, code", [
        (CheckFailedException(["gradients"]), 1),
        (InvalidInputException("bad"), 2),
        (IncompatibleDatasetException("dpo", "unpaired"), 2),
        (MissingArtifactException("runs/x/world.txt"), 2),
        (NumericalException("inf"), 3),
        (DomainException("log", 4, -1.0), 3),
    ])
    def test_exit_codes(self, exception, code):
        assert get_exit_code(exception) == code

    def test_to_dict(self):
        info = IncompatibleDatasetException("dpo", "unpaired").to_dict()
        assert info["error_code"] == "INCOMPATIBLE_DATASET"
        assert info["details"] == {"loss_kind": "dpo", "record_kind": "unpaired"}

    def test_domain_error_carries_node(self):
        error = DomainException("log", 7, 0.0)
        assert error.details["node"] == 7
        assert str(error).startswith("[DOMAIN_ERROR]")


class _Collect(logging.Handler):
    def __init__(self):
        super().__init__()
        self.records = []

    def emit(self, record):
        self.records.append(record)


@pytest.mark.logging
class TestLogging:
    """Logger hierarchy and operation timing."""

    def test_component_loggers_are_children(self):
        setup_logging()
        assert get_logger("trainer").name == "pipalab.trainer"

    def test_log_operation_reports_start_and_end(self):
        setup_logging()
        collector = _Collect()
        root = logging.getLogger("pipalab")
        root.addHandler(collector)
        try:
            with log_operation(get_logger("trainer"), "unit op", kind="dpo"):
                pass
        finally:
            root.removeHandler(collector)
        messages = [r.getMessage() for r in collector.records]
        assert messages[0] == "Starting unit op"
        assert messages[1].startswith("Completed unit op")
        assert collector.records[0].context == {"kind": "dpo"}

    def test_log_operation_reraises(self):
        setup_logging()
        with pytest.raises(ValueError):
            with log_operation(get_logger("trainer"), "failing op"):
                raise ValueError("boom")

    def test_file_handler_writes_context(self, tmp_path):
        path = tmp_path / "logs" / "lab.log"
        setup_logging(Settings(LOG_FILE=str(path), LOG_LEVEL="DEBUG"))
        try:
            with log_operation(get_logger("verify"), "file op", checks=2):
                pass
            for handler in logging.getLogger("pipalab").handlers:
                handler.flush()
            lines = path.read_text(encoding="utf-8").splitlines()
        finally:
            setup_logging()
        assert len(lines) == 2
        assert "pipalab.verify" in lines[0]
        assert lines[0].endswith("Starting file op | checks=2")

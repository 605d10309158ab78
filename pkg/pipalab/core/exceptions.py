"""
Custom exceptions for the PIPA laboratory.

This module defines the exception hierarchy for all components. Every
exception carries a stable error code and a details dictionary; the CLI maps
error codes to process exit codes.
"""

from typing import Any, Dict, Optional


class PipaLabException(Exception):
    """
    Base exception for all laboratory errors.

    All custom exceptions inherit from this base class, providing a common
    interface for error handling and categorization.
    """

    def __init__(self, message: str, error_code: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        """
        Initialize the base exception.

        Args:
            message: Human-readable error message
            error_code: Optional error code for programmatic handling
            details: Optional dictionary with additional error details
        """
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.details = details or {}

    def __str__(self) -> str:
        """Return formatted error message."""
        if self.error_code:
            return f"[{self.error_code}] {self.message}"
        return self.message

    def to_dict(self) -> Dict[str, Any]:
        """Convert exception to dictionary for reports."""
        return {
            "error": self.message,
            "error_code": self.error_code,
            "details": self.details,
            "exception_type": self.__class__.__name__,
        }


# Input Exceptions
class InvalidInputException(PipaLabException):
    """Raised when an operation receives arguments violating its preconditions."""

    def __init__(self, message: str, field: Optional[str] = None, value: Optional[Any] = None):
        super().__init__(message, "INVALID_INPUT", {"field": field, "value": value})


class IncompatibleDatasetException(PipaLabException):
    """Raised when a loss kind cannot consume the records of a dataset."""

    def __init__(self, loss_kind: str, record_kind: str):
        message = f"Loss '{loss_kind}' cannot be trained on {record_kind} records"
        super().__init__(message, "INCOMPATIBLE_DATASET", {"loss_kind": loss_kind, "record_kind": record_kind})


# Numeric Exceptions
class NumericalException(PipaLabException):
    """Raised when a computation produces a non-finite or underflowing value."""

    def __init__(self, message: str, node: Optional[int] = None, op: Optional[str] = None, value: Optional[float] = None):
        super().__init__(message, "NUMERIC_ERROR", {"node": node, "op": op, "value": value})


class DomainException(NumericalException):
    """Raised when a primitive is evaluated outside its domain (log of a nonpositive, division by zero)."""

    def __init__(self, op: str, node: int, value: float):
        message = f"{op} undefined at {value!r} (node {node})"
        super().__init__(message, node=node, op=op, value=value)
        self.error_code = "DOMAIN_ERROR"


class UndefinedPosteriorException(NumericalException):
    """Raised when a posterior is requested for an answer with zero total mass."""

    def __init__(self, prompt: int, answer: Any):
        super().__init__(f"Posterior undefined for prompt {prompt}, answer {answer}: zero total mass")
        self.error_code = "UNDEFINED_POSTERIOR"
        self.details.update({"prompt": prompt, "answer": answer})


# Model Exceptions
class ResourceLimitException(PipaLabException):
    """Raised when exact enumeration would exceed the configured budget."""

    def __init__(self, requested: int, budget: int):
        message = f"Enumeration of {requested} sequences exceeds budget {budget}"
        super().__init__(message, "RESOURCE_LIMIT", {"requested": requested, "budget": budget})


class FrozenModelException(PipaLabException):
    """Raised when a frozen policy is asked to expose trainable parameters."""

    def __init__(self, operation: str):
        super().__init__(f"Frozen policy cannot {operation}", "FROZEN_MODEL", {"operation": operation})


# Configuration Exceptions
class ConfigurationException(PipaLabException):
    """Raised when configuration is invalid or missing."""

    def __init__(self, message: str, config_key: Optional[str] = None):
        super().__init__(message, "CONFIGURATION_ERROR", {"config_key": config_key})


class MissingArtifactException(ConfigurationException):
    """Raised when a command needs a file produced by an earlier command."""

    def __init__(self, path: str):
        super().__init__(f"Missing required artifact: {path}")
        self.error_code = "MISSING_ARTIFACT"
        self.details["path"] = path


class ReportFormatException(PipaLabException):
    """Raised when a metrics or report file cannot be parsed."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message, "MALFORMED_REPORT", {"path": path, "line": line})


# Verification Exceptions
class CheckFailedException(PipaLabException):
    """Raised when one or more verification checks fail."""

    def __init__(self, failed: list):
        message = f"{len(failed)} check(s) failed: {', '.join(failed)}"
        super().__init__(message, "CHECK_FAILED", {"failed": list(failed)})


# Error code mapping for CLI exit codes
ERROR_CODE_TO_EXIT = {
    "CHECK_FAILED": 1,
    "INVALID_INPUT": 2,
    "INCOMPATIBLE_DATASET": 2,
    "CONFIGURATION_ERROR": 2,
    "MISSING_ARTIFACT": 2,
    "MALFORMED_REPORT": 2,
    "FROZEN_MODEL": 2,
    "RESOURCE_LIMIT": 2,
    "NUMERIC_ERROR": 3,
    "DOMAIN_ERROR": 3,
    "UNDEFINED_POSTERIOR": 3,
}


def get_exit_code(exception: PipaLabException) -> int:
    """
    Get the process exit code for an exception.

    Args:
        exception: The exception instance

    Returns:
        Exit code (1 check failure, 2 usage/config error, 3 numeric error)
    """
    return ERROR_CODE_TO_EXIT.get(exception.error_code, 2)

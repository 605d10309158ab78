"""
Logging for the PIPA laboratory.

One ``pipalab`` logger carries the handlers: stderr always, a rotating file
when ``PIPALAB_LOG_FILE`` is set. Components log through children of it.
``log_operation`` wraps a unit of work with start, end and failure records
that carry a ``context`` dict of key=value pairs.
"""

import logging
import logging.handlers
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from pipalab.config import Settings, get_settings

ROOT = "pipalab"

_configured = False


class StructuredFormatter(logging.Formatter):
    """Pipe-separated records with the ``context`` pairs appended in key order."""

    def __init__(self):
        super().__init__(
            fmt="%(asctime)s | %(levelname)-8s | %(name)-20s | %(filename)s:%(lineno)d | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        context = getattr(record, "context", None)
        if context:
            message += " | " + " ".join(f"{k}={v}" for k, v in sorted(context.items()))
        return message


def setup_logging(settings: Optional[Settings] = None) -> logging.Logger:
    """(Re)configure the ``pipalab`` logger from settings and return it."""
    global _configured
    settings = settings or get_settings()
    root = logging.getLogger(ROOT)
    for handler in list(root.handlers):
        handler.close()
        root.removeHandler(handler)
    root.setLevel(settings.LOG_LEVEL)
    root.propagate = False

    # stdout is reserved for command output
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(StructuredFormatter())
    root.addHandler(console)

    if settings.LOG_FILE:
        Path(settings.LOG_FILE).parent.mkdir(parents=True, exist_ok=True)
        rotating = logging.handlers.RotatingFileHandler(
            settings.LOG_FILE,
            maxBytes=settings.LOG_MAX_SIZE,
            backupCount=settings.LOG_BACKUP_COUNT,
            encoding="utf-8",
        )
        rotating.setFormatter(StructuredFormatter())
        root.addHandler(rotating)

    _configured = True
    return root


def get_logger(component: str) -> logging.Logger:
    """Child logger ``pipalab.<component>``; configures logging on first use."""
    if not _configured:
        setup_logging()
    return logging.getLogger(f"{ROOT}.{component}")


def get_data_logger() -> logging.Logger:
    return get_logger("seqdata")


def get_model_logger() -> logging.Logger:
    return get_logger("models")


def get_loss_logger() -> logging.Logger:
    return get_logger("losses")


def get_world_logger() -> logging.Logger:
    return get_logger("synthworld")


def get_trainer_logger() -> logging.Logger:
    return get_logger("trainer")


def get_verify_logger() -> logging.Logger:
    return get_logger("verify")


def get_cli_logger() -> logging.Logger:
    return get_logger("cli")


@contextmanager
def log_operation(logger: logging.Logger, operation_name: str, **context):
    """
    Log the start of ``operation_name``, then its duration on success or the
    error on failure; the error is re-raised.
    """
    start = time.perf_counter()
    logger.info(f"Starting {operation_name}", extra={"context": context})
    try:
        yield
    except Exception as e:
        logger.error(f"Failed {operation_name} after {time.perf_counter() - start:.2f}s: {e}",
                     extra={"context": context})
        raise
    logger.info(f"Completed {operation_name} in {time.perf_counter() - start:.2f}s", extra={"context": context})

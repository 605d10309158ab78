#!/usr/bin/env python3
"""
Runner script for the PIPA laboratory.

Logs the active settings and hands the command line to ``pipalab.main``.
"""

import sys

from pipalab.config import get_settings
from pipalab.core.logger import setup_logging
from pipalab.main import main


def run() -> int:
    """Entry point that wraps the CLI with a startup banner."""
    settings = get_settings()
    logger = setup_logging(settings)
    try:
        logger.info("=" * 60)
        logger.info("PIPA laboratory")
        logger.info("=" * 60)
        logger.info(f"Log Level: {settings.LOG_LEVEL}")
        logger.info(f"Enumeration Budget: {settings.ENUMERATION_BUDGET}")
        logger.info(f"Output Directory: {settings.OUTPUT_DIR}")
        logger.info("Commands: gen, train, verify, report")
        logger.info("=" * 60)
        return main(sys.argv[1:])
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 0
    except Exception as e:
        logger.error(f"Unexpected failure: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(run())

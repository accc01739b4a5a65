"""
Logger configuration module for the generalized Snell envelope toolkit.

Provides centralized logging configuration with console output, so solver runs and
property suites log the same way whether they are called from the CLI or from tests.
Creates a standardized formatter with timestamp, module, line number, level, function name,
and message. All logs are sent to stdout.
"""

import logging
import os
import sys


def configure_logging(
    name: str = "generalized_snell",
    log_level: int | str | None = None,
) -> logging.Logger:
    """Configure logger"""

    if log_level is None:
        log_level = os.getenv("SNELL_LOG_LEVEL", "INFO")
    if isinstance(log_level, str):
        log_level = logging.getLevelName(log_level.upper())
        if not isinstance(log_level, int):
            log_level = logging.INFO

    root_logger = logging.getLogger(name)
    root_logger.setLevel(log_level)

    # Remove any existing handlers to avoid duplicates
    root_logger.handlers.clear()
    # Solver modules log through this one logger; don't double-print via the root logger
    root_logger.propagate = False

    formatter = logging.Formatter(
        "%(asctime)s : %(module)s : %(lineno)d : %(levelname)s : %(funcName)s : %(message)s"
    )

    console_handler = logging.StreamHandler(stream=sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    root_logger.debug("Finished configuring the logger(s)")

    return root_logger


def set_log_level(log_level: int) -> None:
    """Change the level of the shared logger and its handlers (e.g. for --verbose)"""
    logger.setLevel(log_level)
    for handler in logger.handlers:
        handler.setLevel(log_level)


logger: logging.Logger = configure_logging()

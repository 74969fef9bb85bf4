"""structlog setup shared by the CLI and the services."""

import logging
import sys
from typing import Any

import structlog

from ..config.env import config


def _renderer(fmt: str) -> Any:
    if fmt == "console":
        return structlog.dev.ConsoleRenderer(colors=False)
    return structlog.processors.JSONRenderer(sort_keys=True)


def configure_logging(level: str | None = None, fmt: str | None = None) -> None:
    """Idempotent. Events go to stderr so command output on stdout stays clean."""
    if getattr(configure_logging, "_configured", False):
        return

    numeric_level = logging.getLevelName((level or config.LOG_LEVEL).upper())
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=numeric_level)

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso", utc=True),
            structlog.processors.format_exc_info,
            _renderer(fmt or config.LOG_FORMAT),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=True,
    )

    configure_logging._configured = True  # type: ignore[attr-defined]


def bind_run(**values: Any) -> None:
    """Attach run-level context (command, run dir) to every later event."""
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(**values)


def get_logger(**initial_values: Any) -> Any:
    return structlog.get_logger(**initial_values)

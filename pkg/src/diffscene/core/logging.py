"""Centralized logging configuration for diffscene."""

from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console(stderr=True)

_LOG_FORMAT = "%(message)s"


def _rich_handler() -> RichHandler:
    handler = RichHandler(
        console=console,
        show_time=False,
        show_path=False,
        markup=True,
    )
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    return handler


def get_logger(name: str, level: int | None = None) -> logging.Logger:
    """Return a logger under the ``diffscene`` hierarchy.

    Child loggers propagate to the ``diffscene`` root configured by
    :func:`setup_logging`; a standalone logger (outside the hierarchy) gets its
    own Rich handler.

    Args:
        name: Logger name (typically ``__name__``).
        level: Optional explicit level.

    Returns:
        Configured :class:`logging.Logger`.
    """
    logger = logging.getLogger(name)
    if name.startswith("diffscene"):
        root = logging.getLogger("diffscene")
        if not root.handlers:
            root.addHandler(_rich_handler())
            root.setLevel(logging.INFO)
    elif not logger.handlers:
        logger.addHandler(_rich_handler())
    if level is not None:
        logger.setLevel(level)
    return logger


def setup_logging(verbose: bool = False) -> None:
    """Configure root logging for the CLI.

    Args:
        verbose: If ``True``, set level to DEBUG.
    """
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger("diffscene")
    root.setLevel(level)
    if not root.handlers:
        root.addHandler(_rich_handler())

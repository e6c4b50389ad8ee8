"""
Logging setup for meshfl.

Console output goes through colorlog; a run can additionally mirror every
record into a JSON-lines file using python-json-logger. Verbosity comes from
the ``MESHFL_LOG`` environment variable (a ``.env`` file in the working
directory is honoured).
"""

import logging
import os
from pathlib import Path
from typing import Optional, Union

import colorlog
from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger

ENV_VAR = "MESHFL_LOG"
DEFAULT_LEVEL = "WARNING"

_CONSOLE_FORMAT = "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"
_JSON_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def resolve_level(level: Optional[str] = None) -> int:
    """
    Work out the effective log level.

    Args:
        level: Explicit level name; falls back to ``MESHFL_LOG`` and then WARNING

    Returns:
        Numeric logging level
    """
    load_dotenv(override=False)
    name = (level or os.environ.get(ENV_VAR) or DEFAULT_LEVEL).upper()
    value = logging.getLevelName(name)
    if not isinstance(value, int):
        # Unknown names are not fatal; keep the default verbosity.
        return logging.WARNING
    return value


def configure_logging(level: Optional[str] = None,
                      json_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    """
    Configure the ``meshfl`` logger hierarchy.

    Calling this again replaces the handlers installed by a previous call.

    Args:
        level: Level name overriding ``MESHFL_LOG``
        json_file: Optional path of a JSON-lines log file

    Returns:
        The configured package logger
    """
    logger = logging.getLogger("meshfl")
    logger.setLevel(resolve_level(level))

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console = colorlog.StreamHandler()
    console.setFormatter(colorlog.ColoredFormatter(
        _CONSOLE_FORMAT,
        log_colors={
            "DEBUG": "cyan",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "bold_red",
        },
    ))
    logger.addHandler(console)

    if json_file is not None:
        path = Path(json_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(path, mode="w", encoding="utf-8")
        file_handler.setFormatter(jsonlogger.JsonFormatter(_JSON_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger

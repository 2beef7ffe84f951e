"""Centralized logging configuration for PourGPS.

This module provides:
- Safe, consistent stdout logging format
- Level resolution from explicit value, experiment config or environment
- Quieter defaults for chatty libraries
"""

from __future__ import annotations

import logging
import os
import sys
from typing import Optional


LOG_LEVEL_ENV = 'GPS_LOG_LEVEL'

_VALID_LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
}


def normalize_level(level: str | None, default: str = 'INFO') -> str:
    level = (level or '').strip().upper() or default
    return level if level in _VALID_LEVELS else default


def get_effective_log_level(config=None) -> str:
    """Return the effective log level string.

    Priority:
    1) experiment config log_level (if a config is given)
    2) env GPS_LOG_LEVEL
    3) default INFO
    """
    env_level = normalize_level(os.environ.get(LOG_LEVEL_ENV))
    if config is not None:
        return normalize_level(getattr(config, 'log_level', None), default=env_level)
    return env_level


def configure_logging(level: Optional[str] = None, config=None) -> str:
    """Configure root logging. Returns the applied level string."""
    applied_level = normalize_level(level) if level else get_effective_log_level(config=config)
    numeric_level = _VALID_LEVELS[applied_level]

    root = logging.getLogger()

    # Ensure we have exactly one stdout handler with a good format.
    handler_exists = any(isinstance(h, logging.StreamHandler) for h in root.handlers)
    if not handler_exists:
        handler = logging.StreamHandler(stream=sys.stdout)
        formatter = logging.Formatter(
            fmt='%(asctime)s %(levelname)s %(name)s: %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S',
        )
        handler.setFormatter(formatter)
        root.addHandler(handler)

    root.setLevel(numeric_level)

    # Keep noisy libraries quieter unless explicitly debugging.
    if numeric_level > logging.DEBUG:
        logging.getLogger('sqlalchemy.engine').setLevel(logging.WARNING)
        logging.getLogger('werkzeug').setLevel(logging.WARNING)

    return applied_level

"""Structured (JSON) logging for library code and the CLI."""

import logging
import os
import sys
from typing import Optional

from pythonjsonlogger.json import JsonFormatter

_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
_configured = False


def configure_logging(level: Optional[str] = None) -> None:
    """Install one JSON stream handler on the ``opwalk`` root logger."""
    global _configured
    root = logging.getLogger("opwalk")
    level_name = (level or os.environ.get("OPWALK_LOG_LEVEL", "INFO")).upper()
    root.setLevel(level_name)
    if _configured:
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter(_FORMAT))
    root.addHandler(handler)
    root.propagate = False
    _configured = True


def get_logger(name: str) -> logging.Logger:
    """Logger below the ``opwalk`` namespace, configured on first use."""
    if not _configured:
        configure_logging()
    if not name.startswith("opwalk"):
        name = f"opwalk.{name}"
    return logging.getLogger(name)

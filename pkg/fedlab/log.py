"""
Logging setup for the command-line entry points. Library modules only call
``logging.getLogger(__name__)``.
"""

import logging
import os

ENV_VAR = "FEDLAB_LOG"
_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def log_level() -> int:
    """Level named by $FEDLAB_LOG, WARNING when unset or unrecognised"""
    name = os.environ.get(ENV_VAR, "WARNING").strip().upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING


def configure_logging(level: int = None) -> logging.Logger:
    """Attach a single stream handler to the ``fedlab`` logger"""
    logger = logging.getLogger("fedlab")
    logger.setLevel(log_level() if level is None else level)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        logger.addHandler(handler)
    return logger

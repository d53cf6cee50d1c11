"""
TGR-MoE desk-scale lab.
Teacher-guided routing for sparse mixture-of-experts, trained end to end on a numpy autodiff engine.
"""

import logging
import os
import sys

import structlog
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

__version__ = "0.1.0"


def configure_logging(level: str = None, fmt: str = None) -> None:
    """Configure structlog for the package.

    Args:
        level: Log level name; defaults to TGR_LOG_LEVEL or INFO
        fmt: "json" or "console"; defaults to TGR_LOG_FORMAT or json
    """
    level = (level or os.getenv('TGR_LOG_LEVEL', 'INFO')).upper()
    fmt = (fmt or os.getenv('TGR_LOG_FORMAT', 'json')).lower()
    numeric_level = logging.getLevelName(level)
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso", key="timestamp"),
            structlog.processors.StackInfoRenderer(),
            structlog.dev.ConsoleRenderer() if fmt == 'console' else structlog.processors.JSONRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        # stderr keeps stdout clean for CSV emitted by the CLI
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


# Configure structured logging
configure_logging()

logger = structlog.get_logger()

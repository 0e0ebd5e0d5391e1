"""Process-wide environment and logging setup."""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from loguru import logger

ENV_DATA_ROOT = "IRSR_DATA_ROOT"
ENV_LOG_LEVEL = "IRSR_LOG_LEVEL"

CONSOLE_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan> | {message}"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level} | {name}:{function}:{line} | {message}"


def setup_environment(env_file: Path | None = None) -> bool:
    """Load variables from a .env file if one exists.

    Returns True when a file was loaded.
    """
    env_file = env_file or Path(".env")
    if env_file.exists():
        load_dotenv(env_file)
        return True
    return False


def configure_logging(level: str | None = None, log_dir: Path | None = None) -> str:
    """Route loguru to stderr and, optionally, a rotating file under ``log_dir``.

    Returns the console level in effect.
    """
    level = (level or os.getenv(ENV_LOG_LEVEL, "INFO")).upper()
    handlers: list[dict[str, Any]] = [{"sink": sys.stderr, "level": level, "format": CONSOLE_FORMAT}]
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(
            {
                "sink": log_dir / "irsr.log",
                "level": "DEBUG",
                "format": FILE_FORMAT,
                "rotation": "10 MB",
                "retention": "1 week",
                "compression": "zip",
            }
        )
    logger.configure(handlers=handlers)
    return level


def data_root() -> Path | None:
    """Default root for relative dataset paths, from ``IRSR_DATA_ROOT``."""
    value = os.getenv(ENV_DATA_ROOT)
    return Path(value) if value else None

# Runtime settings and logging setup
# Environment variables are read from the process and from a project-level
# .env file, so commands behave the same when run directly or from tests.

import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from .errors import ConfigurationError

current_dir = Path(__file__).parent
project_root = current_dir.parent
env_path = project_root / ".env"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class RuntimeSettings(BaseModel):
    """Process-wide knobs that are not part of an experiment config."""
    threads: int = Field(default=1, ge=1)     # UGT_THREADS: grid-search parallelism cap
    log_level: str = "INFO"                   # UGT_LOG_LEVEL
    debug: bool = False                       # UGT_DEBUG: NaN/Inf guard on tensor ops

    @field_validator("log_level")
    @classmethod
    def known_level(cls, value: str) -> str:
        level = value.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {value!r}")
        return level


def load_settings(dotenv_path: Optional[Path] = None) -> RuntimeSettings:
    """Build RuntimeSettings from the environment (.env values never override
    variables that are already set)."""
    load_dotenv(dotenv_path=str(dotenv_path or env_path))
    raw = {
        "threads": os.getenv("UGT_THREADS", "1"),
        "log_level": os.getenv("UGT_LOG_LEVEL", "INFO"),
        "debug": os.getenv("UGT_DEBUG", "0").strip().lower() in {"1", "true", "yes", "on"},
    }
    try:
        return RuntimeSettings(**raw)
    except ValidationError as e:
        raise ConfigurationError(f"invalid environment settings: {e.errors()[0]['loc'][0]}: {e.errors()[0]['msg']}") from e


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
    logging.getLogger("ugt_rec").setLevel(level.upper())

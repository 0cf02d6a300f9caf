"""
Process settings loaded from the environment (and an optional .env file).
Experiment settings live in JSON configs, see app/models/schemas.py.
"""
import os
from functools import lru_cache
from typing import Optional

import psutil
from dotenv import load_dotenv
from pydantic import BaseModel, Field

from app.errors import ConfigError

load_dotenv()

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class Settings(BaseModel):
    log_level: str = "INFO"
    workers: int = Field(default=1, ge=1)
    api_host: str = "0.0.0.0"
    api_port: int = Field(default=8000, ge=1, le=65535)
    grad_batches: int = Field(default=10, ge=1)
    output_dir: str = "recovered"


def _int_env(name: str, default: Optional[int]) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    log_level = os.getenv("STEGONET_LOG_LEVEL", "INFO").upper()
    if log_level not in _LOG_LEVELS:
        raise ConfigError(f"STEGONET_LOG_LEVEL must be one of {_LOG_LEVELS}, got {log_level!r}")

    workers = _int_env("STEGONET_WORKERS", None)
    if workers is None:
        workers = psutil.cpu_count(logical=False) or 1
    if workers < 1:
        raise ConfigError("STEGONET_WORKERS must be at least 1")

    grad_batches = _int_env("STEGONET_GRAD_BATCHES", 10)
    if grad_batches < 1:
        raise ConfigError("STEGONET_GRAD_BATCHES must be at least 1")

    return Settings(
        log_level=log_level,
        workers=workers,
        api_host=os.getenv("STEGONET_API_HOST", "0.0.0.0"),
        api_port=_int_env("STEGONET_API_PORT", 8000),
        grad_batches=grad_batches,
        output_dir=os.getenv("STEGONET_OUTPUT_DIR") or "recovered",
    )

"""Process settings (env/.env)."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Environment-level overrides that are not part of a run config."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    report_dir: Path | None = Field(default=None, alias="PARKING_REPORT_DIR")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(
        default="INFO",
        alias="PARKING_LOG_LEVEL",
    )
    num_threads: int = Field(default=1, alias="PARKING_NUM_THREADS", ge=1, le=256)

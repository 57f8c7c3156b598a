"""
Application configuration management with environment variable support.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.models import DeltaConvention, TailSide

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration file or value."""
    pass


class Settings(BaseSettings):
    """Application settings with validation and type checking."""

    model_config = SettingsConfigDict(
        env_prefix="SMILE_", env_file=".env", case_sensitive=False, extra="ignore"
    )

    # Logging
    log_level: str = "INFO"
    log_format: str = "console"

    # Density and VaR
    var_level: float = 0.01
    grid_points: int = 512
    grid_width: float = 10.0

    # Quotes and fixtures
    # unset defers to the convention= line of each quote file
    delta_convention: Optional[DeltaConvention] = None
    seed: int = 20100104

    # Historical statistics
    group_size: int = 300
    tail_lower_pct: float = 85.0
    tail_upper_pct: float = 99.0
    tail_side: TailSide = TailSide.BOTH

    # Sweep and fitting
    sweep_samples: int = 3
    sweep_workers: int = 1
    fit_max_iterations: int = 500

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v!r}")
        return level

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        if v not in {"console", "json"}:
            raise ValueError("log_format must be 'console' or 'json'")
        return v

    @field_validator("var_level")
    @classmethod
    def validate_var_level(cls, v: float) -> float:
        if not 0.0 < v <= 0.5:
            raise ValueError("var_level must lie in (0, 0.5]")
        return v

    @field_validator("grid_points")
    @classmethod
    def validate_grid_points(cls, v: int) -> int:
        if v < 16:
            raise ValueError("grid_points must be at least 16")
        return v

    @field_validator("grid_width", "sweep_samples", "sweep_workers", "fit_max_iterations")
    @classmethod
    def validate_positive(cls, v: Union[int, float]) -> Union[int, float]:
        if not v > 0:
            raise ValueError("value must be positive")
        return v

    @field_validator("group_size")
    @classmethod
    def validate_group_size(cls, v: int) -> int:
        if v < 300:
            raise ValueError("group_size must be at least 300")
        return v

    @model_validator(mode="after")
    def validate_percentiles(self) -> "Settings":
        if not 0.0 <= self.tail_lower_pct < self.tail_upper_pct <= 100.0:
            raise ValueError("tail percentiles must satisfy 0 <= lower < upper <= 100")
        return self


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Parse ``key=value`` lines; ``#`` comments and blank lines are skipped.

    Raises:
        ConfigError: On unreadable files, malformed lines or unknown keys
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e

    values: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in Settings.model_fields:
            raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        values[key] = value
    return values


def load_settings(path: Optional[Union[str, Path]] = None, **overrides: Any) -> Settings:
    """
    Merge defaults, environment, an optional config file and explicit overrides.

    Later sources win: overrides > file > environment > defaults.
    """
    values: Dict[str, Any] = read_config_file(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


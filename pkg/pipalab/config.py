"""
Configuration management for the PIPA desk-scale laboratory.

This module provides centralized configuration management using Pydantic Settings
for type-safe, validated configuration with environment variable support.
"""

from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Process-wide settings with validation and environment variable support.

    Experiment-specific knobs (worlds, datasets, losses) live in the experiment
    configuration file; this class only carries what every command shares:
    logging, numeric guards and default hyperparameters.
    """

    model_config = SettingsConfigDict(
        env_prefix="PIPALAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Logging Configuration
    LOG_LEVEL: str = Field("INFO", description="Logging level")
    LOG_FILE: str = Field("", description="Log file path, empty disables file logging")
    LOG_MAX_SIZE: int = Field(10 * 1024 * 1024, description="Maximum log file size in bytes")  # 10MB
    LOG_BACKUP_COUNT: int = Field(5, description="Number of backup log files")

    # Numeric guards
    ENUMERATION_BUDGET: int = Field(10**6, description="Maximum number of sequences enumerated exactly")
    UNDERFLOW_FLOOR: float = Field(1e-300, description="Smallest prior token probability accepted by losses")

    # Default hyperparameters
    DEFAULT_BETA: float = Field(0.1, description="Default DPO/IPO temperature")
    DEFAULT_EPSILON: float = Field(1e-6, description="Default PIPA-M clip margin")
    DEFAULT_CONTEXT_WINDOW: int = Field(2, description="Default number of trailing answer tokens in a context key")

    # Output
    OUTPUT_DIR: str = Field("runs", description="Default output directory for commands")

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"LOG_LEVEL must be one of {valid_levels}")
        return v.upper()

    @field_validator("ENUMERATION_BUDGET")
    @classmethod
    def validate_budget(cls, v: int) -> int:
        """Validate enumeration budget."""
        if v < 1:
            raise ValueError("ENUMERATION_BUDGET must be at least 1")
        return v

    @field_validator("DEFAULT_EPSILON")
    @classmethod
    def validate_epsilon(cls, v: float) -> float:
        """Validate clip margin."""
        if not 0.0 < v < 1e-3:
            raise ValueError("DEFAULT_EPSILON must lie in (0, 1e-3)")
        return v

    @field_validator("DEFAULT_CONTEXT_WINDOW")
    @classmethod
    def validate_window(cls, v: int) -> int:
        """Validate context window."""
        if v < 0:
            raise ValueError("DEFAULT_CONTEXT_WINDOW must be non-negative")
        return v


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """
    Get the global settings instance.

    Returns:
        Settings: The global settings instance
    """
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    """Drop the cached settings so the next call re-reads the environment."""
    global _settings
    _settings = None

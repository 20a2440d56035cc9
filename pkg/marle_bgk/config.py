"""
Marle BGK - Ambient Settings

Process-level settings (logging and error reporting) read from the environment
and an optional .env file. Physics parameters never come from here: the run
configuration file is the single source of truth for a computation.
"""
import logging
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


class Settings(BaseSettings):
    """Ambient settings with validation."""

    model_config = SettingsConfigDict(
        env_prefix="MARLE_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "INFO"

    # Error monitoring (optional)
    SENTRY_DSN: Optional[str] = None

    @field_validator("ENVIRONMENT")
    @classmethod
    def validate_environment(cls, v: str) -> str:
        v = v.strip().lower()
        if v not in {"development", "production"}:
            raise ValueError("ENVIRONMENT must be 'development' or 'production'")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        v = v.strip().upper()
        if v not in _LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}")
        return v

    @property
    def is_production(self) -> bool:
        return self.ENVIRONMENT == "production"


# Singleton instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get ambient settings singleton."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    """Drop the cached settings (tests patch the environment between runs)."""
    global _settings
    _settings = None


def init_error_monitoring(settings: Settings) -> bool:
    """Initialise Sentry when a DSN is configured and the SDK is installed."""
    logger = logging.getLogger(__name__)
    if not settings.SENTRY_DSN:
        logger.info("Sentry not configured (set MARLE_SENTRY_DSN to enable error reporting)")
        return False
    try:
        import sentry_sdk
    except ImportError:
        logger.warning("Sentry SDK not installed. Install with: pip install sentry-sdk")
        return False
    sentry_sdk.init(dsn=settings.SENTRY_DSN, environment=settings.ENVIRONMENT, traces_sample_rate=0.0)
    logger.info("Sentry error monitoring initialized")
    return True

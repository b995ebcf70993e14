from pydantic_settings import BaseSettings, SettingsConfigDict
import logging


class Settings(BaseSettings):
    PROJECT_NAME: str = "inkood"
    VERSION: str = "0.1.0"

    # Logging is the only thing tunable from the environment; run behaviour
    # comes exclusively from the run config file.
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Report schema tag written at the top of every report file
    REPORT_SCHEMA: str = "ssreport/1"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="INKOOD_",
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()


def configure_logging(level: str | None = None) -> None:
    """Install the root handler once, from the CLI entry point."""
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format=settings.LOG_FORMAT,
    )

"""
Runtime settings for the lab
Environment variables (optionally from a .env file) override config-file values
"""

import logging
from pathlib import Path
from typing import Optional

import coloredlogs
from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


class LabSettings(BaseSettings):
    """CNNLDP_* environment overrides"""

    model_config = SettingsConfigDict(env_prefix="CNNLDP_", extra="ignore")

    output_root: Optional[Path] = None
    workers: int = 1
    log_level: str = "INFO"


def get_settings() -> LabSettings:
    """Read settings fresh from the environment"""
    return LabSettings()


def setup_logging(level: Optional[str] = None):
    """Install colored console logging for the cnnldp loggers"""
    level = (level or get_settings().log_level).upper()
    coloredlogs.install(level=level, logger=logging.getLogger("cnnldp"), fmt=LOG_FORMAT)

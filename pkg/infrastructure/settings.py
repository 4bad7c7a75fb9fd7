"""Environment settings and the flat ``key = value`` run configuration files"""

import logging
from pathlib import Path
from typing import Dict, Mapping, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from domain.config import TrainConfig
from domain.exceptions import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CCL_", env_file=".env", extra="ignore")

    data_root: Optional[str] = None
    out_dir: Optional[str] = None
    log_level: str = "INFO"


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped, keys may not repeat"""
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key '{key}'")
        values[key] = value
    return values


def load_config_file(path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        if item["type"] == "extra_forbidden":
            parts.append(f"unknown key '{where}'")
        else:
            parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def build_train_config(file_values: Optional[Mapping[str, object]] = None,
                       overrides: Optional[Mapping[str, object]] = None,
                       settings: Optional[Settings] = None) -> TrainConfig:
    """Defaults < config file < command-line overrides; data_root and out_dir fall back to the environment"""
    settings = settings or Settings()
    merged: Dict[str, object] = {}
    if settings.data_root:
        merged["data_root"] = settings.data_root
    if settings.out_dir:
        merged["out_dir"] = settings.out_dir
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e

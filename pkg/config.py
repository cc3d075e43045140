import logging
from pathlib import Path
from typing import Dict, Optional

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError
from schemas import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-level settings, read from FUSMAE_* environment variables or .env."""

    model_config = SettingsConfigDict(env_prefix="FUSMAE_", env_file=".env", extra="ignore")

    # Default root for run directories when --out is not given
    OUTPUT_ROOT: str = "runs"

    # Logging
    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"

    DEFAULT_SEED: int = 0

    # Worker threads for per-sample forward/backward and data generation (1 = sequential)
    NUM_WORKERS: int = 1

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        if self.NUM_WORKERS < 1:
            raise ValueError("NUM_WORKERS must be at least 1")
        if self.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ValueError("LOG_LEVEL must be one of DEBUG, INFO, WARNING, ERROR")


settings = Settings()


def parse_key_values(text: str, source: str = "<text>") -> Dict[str, str]:
    """Parse flat `key=value` lines; blank lines and `#` comments are skipped."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: str) -> Dict[str, str]:
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return parse_key_values(config_path.read_text(encoding="utf-8"), source=str(config_path))


def resolve_run_config(
    config_file: Optional[str] = None,
    overrides: Optional[Dict[str, str]] = None,
    base: Optional[RunConfig] = None,
) -> RunConfig:
    """
    Resolve a RunConfig with precedence flags > file > defaults.

    `base` replaces the built-in defaults (used when resuming from a checkpoint).
    """
    flat = parse_key_values((base or RunConfig(seed=settings.DEFAULT_SEED)).to_kv(), source="<defaults>")
    if config_file:
        file_values = load_config_file(config_file)
        _check_known_keys(file_values, flat, config_file)
        flat.update(file_values)
    if overrides:
        _check_known_keys(overrides, flat, "<flags>")
        flat.update({key: str(value) for key, value in overrides.items() if value is not None})
    try:
        config = RunConfig.from_flat(flat)
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc
    logger.debug(f"Resolved run config with {len(flat)} keys")
    return config


def _check_known_keys(values: Dict[str, str], known: Dict[str, str], source: str) -> None:
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown config keys {unknown}")


def write_run_config(config: RunConfig, directory: str) -> Path:
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.txt"
    path.write_text(config.to_kv(), encoding="utf-8")
    return path

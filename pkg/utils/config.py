import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from models.config import RunConfig
from utils.errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

LOG_LEVEL_VAR = "TONES2ST_LOG_LEVEL"
RESOLVED_NAME = "config.resolved"


def load_environment() -> str:
    """Load ``.env`` from the working directory if present; returns the log level name."""
    env_path = Path.cwd() / ".env"
    if env_path.exists():
        load_dotenv(env_path)
    return os.environ.get(LOG_LEVEL_VAR, "INFO").upper()


def parse_assignment(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"Expected section.key=value, got {text!r}")
    return key.strip(), value.strip()


def _nest(flat: Dict[str, Optional[str]], source: str) -> Dict[str, object]:
    nested: Dict[str, object] = {}
    sections = set(RunConfig.sections())
    for key, value in flat.items():
        value = "" if value is None else value
        if key in ("seed", "out"):
            nested[key] = value
            continue
        section, dot, name = key.partition(".")
        if not dot or section not in sections:
            raise ConfigError(f"Unknown configuration key {key!r} in {source}")
        nested.setdefault(section, {})[name] = value
    return nested


def _merge(base: Dict[str, object], extra: Dict[str, object]) -> Dict[str, object]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Resolve a run configuration: defaults < file < ``--set`` < explicit flags."""
    values: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"Config file not found: {path}")
        values = _nest(dotenv_values(path), str(path))

    assignments = dict(parse_assignment(item) for item in overrides)
    values = _merge(values, _nest(assignments, "--set"))
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = str(out)

    try:
        config = RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")
    logger.debug(f"Resolved configuration with seed={config.seed} out={config.out}")
    return config


def resolved_text(config: RunConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in sorted(config.flatten().items()))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(resolved_text(config).encode("utf-8")).hexdigest()


def write_resolved(config: RunConfig, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / RESOLVED_NAME
    target.write_text(resolved_text(config), encoding="utf-8")
    return target

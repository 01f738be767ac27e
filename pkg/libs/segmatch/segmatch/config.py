"""Flat `key = value` run configuration files."""
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from .exceptions import ConfigError
from .schemas import PipelineConfig

logger = logging.getLogger("segmatch.config")


def config_from_mapping(values: Mapping[str, Optional[str]], source: str = "<config>") -> PipelineConfig:
    known = set(PipelineConfig.__fields__)
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{source}: unknown configuration key '{key}'")
        if value is None:
            raise ConfigError(f"{source}: key '{key}' has no value")
    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """Read a config file (defaults when path is None) and apply key overrides on top."""
    values: Dict[str, Optional[str]] = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(dotenv_values(path, interpolate=False))
        source = str(path)
    if overrides:
        values.update(overrides)
    config = config_from_mapping(values, source)
    logger.debug(f"Configuration from {source}: {len(values)} keys set")
    return config


def parse_overrides(items) -> Dict[str, str]:
    """Turn ["key=value", ...] into a dict."""
    overrides = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not of the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config: PipelineConfig) -> str:
    lines = []
    for name in PipelineConfig.__fields__:
        value = getattr(config, name)
        if value is None:
            lines.append(f"# {name} =")
        else:
            lines.append(f"{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"

"""TOML configuration file support.

Settings are resolved with this precedence (highest wins):

1. CLI flags
2. The experiment file passed with ``--config``
3. User defaults: ``$XDG_CONFIG_HOME/fedminmax/defaults.toml``
   (defaults to ``~/.config/fedminmax/defaults.toml``)
4. Built-in defaults of the schema

Ambient settings (log level, worker count, output root) additionally honour
environment variables, see ``env.py``.
"""

import logging
import os
import tomllib
from pathlib import Path

from pydantic import ValidationError

from fedminmax.errors import ConfigError
from fedminmax.schema import ExperimentConfig

log = logging.getLogger(__name__)

# Keys read by env.py; they are not part of the experiment schema.
AMBIENT_KEYS = ("log_level", "workers")


def _default_user_config_path() -> Path:
    """Return the XDG-compliant user defaults file path."""
    xdg = os.environ.get("XDG_CONFIG_HOME") or os.path.join(
        os.path.expanduser("~"), ".config"
    )
    return Path(xdg) / "fedminmax" / "defaults.toml"


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(explicit_path: str | Path | None = None) -> dict:
    """Load and merge the user defaults and the experiment file.

    An unreadable user defaults file only logs a warning; an unreadable
    experiment file is a ``ConfigError`` naming the path.
    """
    merged: dict = {}

    user_path = _default_user_config_path()
    if user_path.is_file():
        try:
            merged = tomllib.loads(user_path.read_text("utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            log.warning("failed to read %s: %s", user_path, exc)

    if explicit_path:
        path = Path(explicit_path)
        try:
            merged = _deep_merge(merged, tomllib.loads(path.read_text("utf-8")))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"failed to read {path}: {exc}") from exc

    return merged


# Module-level merged config, populated by ``init()``.
_config: dict = {}


def init(explicit_path: str | Path | None = None) -> dict:
    """Load config files and cache the result module-wide.

    Call once from the CLI entry point, before importing ``env``.
    """
    global _config
    _config = load_config(explicit_path)
    return _config


def get(key: str, default=None):
    """Look up a top-level value from the loaded config."""
    return _config.get(key, default)


def apply_overrides(raw: dict, overrides: dict[str, object]) -> dict:
    """Set dotted keys (``algorithm.rounds``) on a copy of *raw*; ``None`` values are skipped."""
    result = _deep_merge({}, raw)
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = result
        for part in parents:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            else:
                child = dict(child)
                node[part] = child
            node = child
        node[leaf] = value
    return result


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a merged document; every failing key path ends up in the message."""
    document = {k: v for k, v in raw.items() if k not in AMBIENT_KEYS}
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        problems = []
        for error in exc.errors():
            location = ".".join(str(part) for part in error["loc"]) or "<root>"
            problems.append(f"{location}: {error['msg']}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems)) from exc

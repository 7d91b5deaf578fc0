"""Run configuration: layered resolution (file < environment < flags), seed
derivation, and the metadata block echoed into every artifact."""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field

from .errors import ConfigError

SEED_ENV_VAR = "MMNTP_SEED"


def derive_seed(root_seed: int, label: str) -> int:
    """Stable per-stage seed derived from one root seed and a stage label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def load_config_file(path) -> dict[str, dict[str, str]]:
    """Flat key-value config with [sections]; values stay strings here."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    return {section: dict(parser.items(section)) for section in parser.sections()}


@dataclass
class RunConfig:
    """Fully resolved parameters of one CLI invocation."""

    command: str
    seed: int
    params: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "params": {k: self.params[k] for k in sorted(self.params)},
        }


def resolve_seed(flag_seed: int | None, file_seed: str | None, default: int = 0) -> int:
    """Seed precedence: flag > MMNTP_SEED env var > config file > default."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    if file_seed is not None:
        return int(file_seed)
    return default


def layered_get(section: dict[str, str], flags: dict, key: str, cast, default):
    """One resolved value: flag overrides file entry overrides default."""
    flag_val = flags.get(key)
    if flag_val is not None:
        return flag_val
    if key in section:
        try:
            if cast is bool:
                return section[key].strip().lower() in ("1", "true", "yes", "on")
            return cast(section[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {section[key]!r}") from exc
    return default

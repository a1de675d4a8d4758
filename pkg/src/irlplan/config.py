"""Flat key/value run configuration.

Config files are plain text with one ``key = value`` pair per line.  The
syntax is a small TOML subset:

  - ``#`` starts a comment (full-line or trailing),
  - keys are dotted lower_snake identifiers (``train.lr_init``),
  - values are ``true``/``false``, integers, floats, quoted strings, bare
    strings, or comma-separated lists of those.

Environment variables with the ``IRLPLAN_`` prefix override file values:
``IRLPLAN_TRAIN__LR_INIT=0.01`` overrides key ``train.lr_init`` (a double
underscore stands for the dot).
"""

from __future__ import annotations

import os

ENV_PREFIX = "IRLPLAN_"


class ConfigError(Exception):
    pass


def parse_scalar(text: str):
    text = text.strip()
    if not text:
        raise ConfigError("empty value")
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return text[1:-1]
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(parse_scalar(p) for p in text.split(",") if p.strip())
    return parse_scalar(text)


def _valid_key(key: str) -> bool:
    return all(part.isidentifier() for part in key.split(".")) and key


def parse_config(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not _valid_key(key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cfg[key] = parse_value(value)
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    return apply_env_overrides(cfg)


def apply_env_overrides(cfg: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = dict(cfg)
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if _valid_key(key):
            out[key] = parse_value(value)
    return out


def get(cfg: dict, key: str, default=None, type_=None):
    """Typed lookup with a default; raises ConfigError on a type mismatch."""
    if key not in cfg:
        return default
    value = cfg[key]
    if type_ is None:
        return value
    if type_ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, type_) or (type_ is not bool and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {type_.__name__}, got {value!r}")
    return value

"""Flat key=value configuration text.

Used for checkpoint config blocks, the resolved config every command prints
and the files passed with --config. Blank lines and '#' comments are ignored.
"""
from typing import Dict, Iterable, Mapping, Tuple

from errors import ConfigurationError


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_key_values(f.read(), path)
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e.strerror}") from e


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def format_key_values(values: Mapping[str, object]) -> str:
    return "".join(f"{key}={format_value(value)}\n" for key, value in values.items())


def reject_unknown(values: Iterable[str], known: Iterable[str], source: str = "<config>") -> None:
    allowed = set(known)
    for key in values:
        if key not in allowed:
            raise ConfigurationError(f"{source}: unknown key {key!r}")


def parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


def parse_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None


def parse_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None


def parse_triple(value: str, key: str) -> Tuple[float, float, float]:
    """'r,g,b' -> three floats"""
    parts = [p for p in value.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigurationError(f"{key}: expected three comma-separated numbers, got {value!r}")
    r, g, b = (parse_float(p, key) for p in parts)
    return r, g, b


def coerce(value: str, like: object, key: str) -> object:
    """Parse value to the type of an existing default"""
    if isinstance(like, bool):
        return parse_bool(value, key)
    if isinstance(like, int):
        return parse_int(value, key)
    if isinstance(like, float):
        return parse_float(value, key)
    if isinstance(like, tuple):
        return parse_triple(value, key)
    if like is None:
        return value or None
    return value

"""Flat ``key=value`` text files used for every configuration in the package."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load(path) -> dict[str, str]:
    return parse(Path(path).read_text())


def dump(values: dict) -> str:
    return "".join(f"{key}={value}\n" for key, value in values.items())


def as_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def as_ints(value: str) -> list[int]:
    return [int(v) for v in str(value).split(",") if v.strip()]


def as_floats(value: str) -> list[float]:
    return [float(v) for v in str(value).split(",") if v.strip()]


def fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (list, tuple)):
        return ",".join(fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)

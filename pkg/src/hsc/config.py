"""Line-oriented ``key = value`` config files and stable config digests."""

from __future__ import annotations

import dataclasses
import hashlib


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    A ``[section]`` header line is accepted and ignored so TOML-style files
    with flat keys also load.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.replace("-", "_")] = value
    return out


def read_file(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read())


def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def build(cls, values: dict, strict: bool = True):
    """Instantiate dataclass ``cls`` from string (or typed) values."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            continue
        kind = fields[key].type
        try:
            kwargs[key] = _coerce(value, kind) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cls(**kwargs)


def canonical_text(obj) -> str:
    """Sorted ``key = repr`` lines; floats use repr so the text round-trips exactly."""
    items = dataclasses.asdict(obj)
    return "".join(f"{k} = {items[k]!r}\n" for k in sorted(items))


def digest(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")

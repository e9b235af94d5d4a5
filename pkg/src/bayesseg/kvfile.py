"""Flat ``key=value`` text format shared by run configs and checkpoints."""

from __future__ import annotations


class ConfigError(ValueError):
    """Malformed or invalid configuration text."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key=value`` lines; returns ``{key: (raw_value, line_number)}``.

    Blank lines and ``#`` comments are skipped. Duplicate keys are an error.
    """
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, source)
        if key in out:
            raise ConfigError(f"duplicate key {key!r} (first set on line {out[key][1]})", lineno, source)
        out[key] = (value, lineno)
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_kv(items: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in items.items())


def coerce(raw: str, like, key: str = "", line: int | None = None, source: str = "<config>"):
    """Convert ``raw`` to the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(
            f"invalid value {raw!r} for {key} (expected {type(like).__name__})", line, source
        ) from None
    return raw

"""Plain key=value configuration files used for CLI overrides."""

from __future__ import annotations

from .errors import ParseError


def coerce(text: str):
    """Best-effort typing: int, then float, then bool, then raw string."""
    s = text.strip()
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    return s


def read_config(path) -> dict:
    """Parse `key=value` lines; blank lines and #-comments are skipped."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ParseError("expected key=value", line=lineno)
            key, _, value = stripped.partition("=")
            key = key.strip()
            if not key:
                raise ParseError("empty key", line=lineno)
            out[key] = coerce(value)
    return out

"""Key-value config files with dotted sections, and worker-count policy."""

from __future__ import annotations

import os
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_value(raw: str):
    s = raw.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in s:
        return tuple(parse_value(p) for p in s.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``[section]`` headers prefix following keys with
    ``section.``; ``#`` starts a comment."""
    out: dict = {}
    section = ""
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{source}:{n}: empty section header")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: missing key")
        out[f"{section}.{key}" if section else key] = parse_value(val)
    return out


def load_config(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config_text(text, str(p))


def worker_count(deterministic: bool = False, requested: int | None = None) -> int:
    if deterministic:
        return 1
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("CAMKIT_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"CAMKIT_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)

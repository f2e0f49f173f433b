"""Flat ``key = value`` config files with ``include`` support.

Lines starting with ``#`` are comments. ``include = other.cfg`` pulls in another
file (resolved relative to the including file); keys defined later override
earlier ones, so an include placed first acts as a set of shared defaults.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def read_kv_config(path: str | Path, _seen: frozenset[Path] = frozenset()) -> dict[str, str]:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"{path}: include cycle")
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key == "include":
            out.update(read_kv_config(path.parent / value, _seen | {path}))
        else:
            out[key] = value
    # relative paths resolve against the outermost file, not the include
    out["__dir__"] = str(path.parent)
    return out


def resolve_path(cfg: dict[str, str], value: str) -> Path:
    p = Path(value)
    if not p.is_absolute():
        p = Path(cfg.get("__dir__", ".")) / p
    return p


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in {"1", "true", "yes", "on"}:
        return True
    if v in {"0", "false", "no", "off"}:
        return False
    raise ConfigError(f"not a boolean: {value!r}")

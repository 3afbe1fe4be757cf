"""Plain key=value config files shared by the CLI and the library.

One flat namespace; each consumer dataclass picks the keys matching its field
names (optionally behind a prefix, e.g. ``corpus_seq_len`` -> CorpusSpec.seq_len).
Lines starting with '#' and blank lines are ignored.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def _coerce_value(raw: str, hint) -> object:
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if int in args and str in args:
            try:
                return int(raw)
            except ValueError:
                return raw
        hint = args[0]
        origin = typing.get_origin(hint)
    if origin is tuple:
        item = typing.get_args(hint)[0]
        return tuple(_coerce_value(part.strip(), item) for part in raw.split(",") if part.strip())
    if hint is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    raise ConfigError(f"unsupported config field type {hint!r}")


def coerce_dataclass(cls, mapping: dict[str, str], prefix: str = "", **overrides):
    """Build ``cls`` from matching config keys; overrides win over the file."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in mapping:
            kwargs[f.name] = _coerce_value(mapping[key], hints[f.name])
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def dump_config(sections: list[tuple[str, object]], path: str | Path) -> None:
    """Write resolved dataclass configs back out as (prefix, dataclass) pairs."""
    lines = []
    seen = set()
    for prefix, cfg in sections:
        for f in dataclasses.fields(cfg):
            key = f"{prefix}{f.name}"
            if key in seen:
                continue
            seen.add(key)
            val = getattr(cfg, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key}={val}")
    Path(path).write_text("\n".join(lines) + "\n")

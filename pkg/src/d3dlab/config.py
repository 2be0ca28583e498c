"""``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(mapping: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {_fmt(v)}" for k, v in mapping.items()]
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def write_kv(path, mapping: dict, header: str | None = None) -> None:
    Path(path).write_text(format_kv(mapping, header))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    return str(v)


def coerce(text: str, typ):
    """Convert a string to ``typ`` (bool, int, float, str, tuple[int, ...])."""
    origin = typing.get_origin(typ)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        return coerce(text, args[0])
    if origin in (tuple, list):
        args = typing.get_args(typ)
        inner = args[0] if args else str
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(coerce(p, inner) for p in parts)
    if typ is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if isinstance(typ, type) and issubclass(typ, str) and typ is not str:
        return typ(text) if not hasattr(typ, "parse") else typ.parse(text)
    return text


def dataclass_from_kv(cls, mapping: dict[str, str], prefix: str = ""):
    """Build ``cls`` from the keys of ``mapping`` that match its fields."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in mapping:
            kwargs[f.name] = coerce(mapping[key], hints[f.name])
    return cls(**kwargs)


def dataclass_to_kv(obj, prefix: str = "") -> dict[str, object]:
    return {prefix + f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}

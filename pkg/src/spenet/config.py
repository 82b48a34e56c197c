"""Flat ``key=value`` config files with namespaced keys (``net.k``, ``train.lr``)."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, hint):
    origin = typing.get_origin(hint)
    if origin in (tuple, list):
        args = [a for a in typing.get_args(hint) if a is not Ellipsis]
        inner = args[0] if args else str
        text = text.strip()
        if not text:
            return ()
        return tuple(_parse(t, inner) for t in text.split(","))
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.strip() in ("", "None"):
            return None
        return _parse(text, args[0])
    if hint is bool:
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text.strip()


def dump_dataclass(obj, prefix: str) -> list[str]:
    return [f"{prefix}.{f.name}={_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def load_dataclass(cls, kv: dict[str, str], prefix: str, **overrides):
    """Build ``cls`` from the ``prefix.*`` entries of ``kv``; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    args = {}
    for key, value in kv.items():
        ns, _, name = key.partition(".")
        if ns != prefix:
            continue
        if name not in names:
            raise KeyError(f"unknown config key {key!r}")
        args[name] = _parse(value, hints[name])
    args.update(overrides)
    return cls(**args)


def read_config(path: str | Path) -> dict[str, str]:
    kv = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def write_config(path: str | Path, *sections) -> None:
    """``sections`` are ``(prefix, dataclass instance)`` pairs."""
    lines = []
    for prefix, obj in sections:
        lines += dump_dataclass(obj, prefix)
    Path(path).write_text("\n".join(lines) + "\n")

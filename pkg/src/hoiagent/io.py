"""Line-delimited JSON and config-file helpers."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, TextIO, TypeVar

import yaml


class DataError(ValueError):
    """Unreadable or malformed input data, located by file and line."""


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(line_number, object)`` for every non-blank line."""
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"{path}: cannot open: {e.strerror}") from None
    with f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{n}: malformed JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{n}: expected a JSON object")
            yield n, obj


def dump_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n"


def write_jsonl(out: TextIO, rows: Iterable[Any]) -> int:
    n = 0
    for r in rows:
        out.write(dump_line(r))
        n += 1
    return n


def load_structured(path: str | Path) -> Any:
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    return json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)


T = TypeVar("T")


def build_config(cls: type[T], section: Mapping[str, Any] | None, **overrides: Any) -> T:
    """Instantiate a config dataclass from a mapping; ``None`` overrides are ignored."""
    names = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    section = dict(section or {})
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    section.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**section)

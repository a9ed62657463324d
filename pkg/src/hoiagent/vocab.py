"""Closed object/verb vocabularies and the per-category split tags."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping, Union

import yaml

from .core import normalize_label

SPLIT_TAGS = ("seen", "unseen", "rare", "non_rare")


class VocabularyError(ValueError):
    """A vocabulary document breaks one of the structural rules."""


@dataclass(frozen=True)
class Vocabulary:
    objects: frozenset[str]
    verbs: frozenset[str]
    object_to_verbs: Mapping[str, frozenset[str]]
    category_split: Mapping[tuple[str, str], str]

    def __post_init__(self) -> None:
        if not self.objects:
            raise VocabularyError("vocabulary has no objects")
        if not self.verbs:
            raise VocabularyError("vocabulary has no verbs")
        for obj, verbs in self.object_to_verbs.items():
            if obj not in self.objects:
                raise VocabularyError(f"object_to_verbs key {obj!r} is not a known object")
            for v in verbs:
                if v not in self.verbs:
                    raise VocabularyError(f"verb {v!r} under object {obj!r} is not a known verb")
        for (verb, obj), tag in self.category_split.items():
            if obj not in self.objects:
                raise VocabularyError(f"category {verb}|{obj}: object {obj!r} is not a known object")
            if verb not in self.object_to_verbs.get(obj, ()):
                raise VocabularyError(f"category {verb}|{obj}: {verb!r} is not a valid verb for {obj!r}")
            if tag not in SPLIT_TAGS:
                raise VocabularyError(f"category {verb}|{obj}: unknown split tag {tag!r}")

    @property
    def categories(self) -> list[tuple[str, str]]:
        """All valid (verb, object) pairs, sorted."""
        return sorted((v, o) for o, vs in self.object_to_verbs.items() for v in vs)

    def valid_verbs(self, obj: str) -> list[str]:
        return sorted(self.object_to_verbs.get(obj, ()))

    def is_valid(self, verb: str, obj: str) -> bool:
        return verb in self.object_to_verbs.get(obj, ())

    def split_of(self, verb: str, obj: str) -> str | None:
        return self.category_split.get((verb, obj))

    def to_document(self) -> dict[str, Any]:
        return {
            "objects": sorted(self.objects),
            "verbs": sorted(self.verbs),
            "object_to_verbs": {o: sorted(vs) for o, vs in sorted(self.object_to_verbs.items())},
            "category_split": {f"{v}|{o}": t for (v, o), t in sorted(self.category_split.items())},
        }


def _label(raw: Any, what: str) -> str:
    try:
        return normalize_label(raw)
    except (TypeError, ValueError) as e:
        raise VocabularyError(f"{what}: bad entry {raw!r}: {e}") from None


def _unique_labels(items: Any, what: str) -> list[str]:
    if not isinstance(items, list):
        raise VocabularyError(f"{what} must be a list")
    out: list[str] = []
    seen: set[str] = set()
    for raw in items:
        label = _label(raw, what)
        if label in seen:
            raise VocabularyError(f"{what}: duplicate entry {raw!r}")
        seen.add(label)
        out.append(label)
    return out


def load_vocabulary(source: Union[str, Path, Mapping[str, Any]]) -> Vocabulary:
    """Build a :class:`Vocabulary` from a document or a JSON/YAML file path.

    The document has keys ``objects``, ``verbs``, ``object_to_verbs`` and
    ``category_split`` (``"verb|object" -> tag``). ``category_split`` may be
    omitted. Every violation is reported with the offending entry.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        text = path.read_text(encoding="utf-8")
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    else:
        doc = source
    if not isinstance(doc, Mapping):
        raise VocabularyError("vocabulary document must be a mapping")
    for key in ("objects", "verbs", "object_to_verbs"):
        if key not in doc:
            raise VocabularyError(f"vocabulary document is missing key {key!r}")

    objects = _unique_labels(doc["objects"], "objects")
    verbs = _unique_labels(doc["verbs"], "verbs")
    if not objects:
        raise VocabularyError("vocabulary has no objects")
    if not verbs:
        raise VocabularyError("vocabulary has no verbs")
    object_set, verb_set = frozenset(objects), frozenset(verbs)

    o2v_raw = doc["object_to_verbs"]
    if not isinstance(o2v_raw, Mapping):
        raise VocabularyError("object_to_verbs must be a mapping")
    o2v: dict[str, frozenset[str]] = {}
    for raw_obj, raw_verbs in o2v_raw.items():
        obj = _label(raw_obj, "object_to_verbs")
        if obj in o2v:
            raise VocabularyError(f"object_to_verbs: duplicate object {raw_obj!r}")
        if obj not in object_set:
            raise VocabularyError(f"object_to_verbs: object {raw_obj!r} not in objects")
        vs = _unique_labels(raw_verbs, f"object_to_verbs[{raw_obj!r}]")
        for v in vs:
            if v not in verb_set:
                raise VocabularyError(f"object_to_verbs[{raw_obj!r}]: verb {v!r} not in verbs")
        o2v[obj] = frozenset(vs)

    split_raw = doc.get("category_split") or {}
    if not isinstance(split_raw, Mapping):
        raise VocabularyError("category_split must be a mapping")
    split: dict[tuple[str, str], str] = {}
    for key, tag in split_raw.items():
        parts = str(key).split("|")
        if len(parts) != 2:
            raise VocabularyError(f"category_split key {key!r} is not 'verb|object'")
        cat = (_label(parts[0], "category_split"), _label(parts[1], "category_split"))
        if cat in split:
            raise VocabularyError(f"category_split: duplicate category {key!r}")
        split[cat] = str(tag)

    return Vocabulary(
        objects=object_set,
        verbs=verb_set,
        object_to_verbs=MappingProxyType(o2v),
        category_split=MappingProxyType(split),
    )

"""Box geometry, label canonicalization and the triplet/image records."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

_WS = re.compile(r"\s+")


def normalize_label(s: str) -> str:
    """Canonical form of a verb/object string.

    Lowercases, maps underscores to spaces, collapses runs of whitespace
    and trims the edges. Raises ``ValueError`` if nothing is left.
    """
    if not isinstance(s, str):
        raise TypeError(f"label must be a string, got {type(s).__name__}")
    out = _WS.sub(" ", s.replace("_", " ").lower()).strip()
    if not out:
        raise ValueError(f"label {s!r} is empty after normalization")
    return out


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in original-image pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError(f"{name} must be a real number, got {v!r}")
            v = float(v)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name}={v!r} must be finite and non-negative")
            object.__setattr__(self, name, v)
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"degenerate box ordering: {self.as_list()}")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BBox":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*seq)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def union_box(self, other: "BBox") -> "BBox":
        return BBox(min(self.x1, other.x1), min(self.y1, other.y1),
                    max(self.x2, other.x2), max(self.y2, other.y2))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    # zero-area boxes have inter == 0, so they score 0 even against themselves
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


@dataclass(frozen=True)
class HOITriplet:
    verb: str
    object: str
    human_box: BBox
    object_box: BBox
    score: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "verb", normalize_label(self.verb))
        object.__setattr__(self, "object", normalize_label(self.object))
        if self.score is not None:
            s = float(self.score)
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"score {s} outside [0, 1]")
            object.__setattr__(self, "score", s)

    @property
    def category(self) -> tuple[str, str]:
        return (self.verb, self.object)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "verb": self.verb,
            "object": self.object,
            "human_box": self.human_box.as_list(),
            "object_box": self.object_box.as_list(),
        }
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HOITriplet":
        return cls(
            verb=d["verb"],
            object=d["object"],
            human_box=BBox.from_seq(d["human_box"]),
            object_box=BBox.from_seq(d["object_box"]),
            score=d.get("score"),
        )


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    ground_truth: tuple[HOITriplet, ...] = ()
    predictions: tuple[HOITriplet, ...] = ()
    image: Optional[str] = None
    query: Optional[str] = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        object.__setattr__(self, "predictions", tuple(self.predictions))
        for t in self.ground_truth + self.predictions:
            for b in (t.human_box, t.object_box):
                if not box_in_frame(b, self.width, self.height):
                    raise ValueError(f"image {self.image_id}: box {b.as_list()} outside "
                                     f"{self.width}x{self.height} frame")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"image_id": self.image_id, "width": self.width, "height": self.height}
        if self.image is not None:
            d["image"] = self.image
        if self.query is not None:
            d["query"] = self.query
        d["ground_truth"] = [t.to_dict() for t in self.ground_truth]
        d["predictions"] = [t.to_dict() for t in self.predictions]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ImageRecord":
        known = {"image_id", "width", "height", "ground_truth", "predictions", "image", "query"}
        return cls(
            image_id=str(d["image_id"]),
            width=d["width"],
            height=d["height"],
            ground_truth=tuple(HOITriplet.from_dict(t) for t in d.get("ground_truth", [])),
            predictions=tuple(HOITriplet.from_dict(t) for t in d.get("predictions", [])),
            image=d.get("image"),
            query=d.get("query"),
            extra={k: v for k, v in d.items() if k not in known},
        )


def box_in_frame(b: BBox, width: float, height: float) -> bool:
    return b.x2 <= width and b.y2 <= height


def categories(triplets: Iterable[HOITriplet]) -> set[tuple[str, str]]:
    return {t.category for t in triplets}

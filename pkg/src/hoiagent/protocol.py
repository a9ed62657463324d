"""Two-turn agent output grammar.

Turn 1 answer::

    person, [x1,y1,x2,y2], bicycle, [x1,y1,x2,y2] ; image_crop, outpaint

Turn 2 answer::

    1: ride, bicycle, [px1,py1,px2,py2], [ox1,oy1,ox2,oy2], 2: hold, cup, [...], [...]

Both are wrapped in a ``<think>...</think><answer>...</answer>`` envelope.
Parsing is total: every string yields a value or a :class:`ProtocolError`.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional

from .core import BBox, HOITriplet, normalize_label


class ProtocolError(ValueError):
    """Base class of every grammar violation."""


class MissingBlock(ProtocolError):
    def __init__(self, tag: str):
        super().__init__(f"missing <{tag}> block")
        self.tag = tag


class DuplicateBlock(ProtocolError):
    def __init__(self, tag: str):
        super().__init__(f"more than one <{tag}> block")
        self.tag = tag


class UnclosedBlock(ProtocolError):
    def __init__(self, tag: str):
        super().__init__(f"<{tag}> block is not properly closed")
        self.tag = tag


class StrayText(ProtocolError):
    """Non-whitespace text outside the think/answer blocks, or nested blocks."""


class MalformedBox(ProtocolError):
    pass


class UnknownTool(ProtocolError):
    def __init__(self, name: str):
        super().__init__(f"unknown tool {name!r}")
        self.name = name


class DanglingLabel(ProtocolError):
    pass


class MissingSeparator(ProtocolError):
    pass


class MultipleSeparators(ProtocolError):
    pass


class MalformedRecord(ProtocolError):
    def __init__(self, ordinal: int, reason: str):
        super().__init__(f"record {ordinal}: {reason}")
        self.ordinal = ordinal
        self.reason = reason


class DuplicateIndex(ProtocolError):
    def __init__(self, index: int):
        super().__init__(f"duplicate record index {index}")
        self.index = index


class EmptyAnswer(ProtocolError):
    """The answer block holds no records: the agent claims no interactions."""

    def __init__(self) -> None:
        super().__init__("empty answer")


class ToolKind(str, enum.Enum):
    image_crop = "image_crop"
    outpaint = "outpaint"
    viewpoint_transform = "viewpoint_transform"
    action_description = "action_description"
    scene_explanation = "scene_explanation"

    @classmethod
    def parse(cls, name: str) -> "ToolKind":
        key = name.strip().lower()
        if key == "image_description":
            return cls.scene_explanation
        try:
            return cls(key)
        except ValueError:
            raise UnknownTool(name) from None

    def render(self) -> str:
        return self.value

    @property
    def is_generative(self) -> bool:
        return self in (ToolKind.outpaint, ToolKind.viewpoint_transform)

    @property
    def is_textual(self) -> bool:
        return self in (ToolKind.action_description, ToolKind.scene_explanation)


@dataclass(frozen=True)
class Envelope:
    think: str
    answer: str


@dataclass(frozen=True)
class Turn1Decision:
    detections: tuple[tuple[str, BBox], ...] = ()
    tools: tuple[ToolKind, ...] = ()

    def __post_init__(self) -> None:
        dets = tuple((normalize_label(lbl), box) for lbl, box in self.detections)
        tools: list[ToolKind] = []
        for t in self.tools:
            t = t if isinstance(t, ToolKind) else ToolKind.parse(t)
            if t not in tools:
                tools.append(t)
        object.__setattr__(self, "detections", dets)
        object.__setattr__(self, "tools", tuple(tools))

    @property
    def labels(self) -> list[str]:
        return [lbl for lbl, _ in self.detections]


@dataclass(frozen=True)
class Turn2Record:
    index: int
    verb: str
    object: str
    human_box: BBox
    object_box: BBox

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"record index must be positive, got {self.index}")
        object.__setattr__(self, "verb", normalize_label(self.verb))
        object.__setattr__(self, "object", normalize_label(self.object))

    def to_triplet(self) -> HOITriplet:
        return HOITriplet(self.verb, self.object, self.human_box, self.object_box)


@dataclass(frozen=True)
class Turn2Answer:
    records: tuple[Turn2Record, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[int] = set()
        for r in self.records:
            if r.index in seen:
                raise DuplicateIndex(r.index)
            seen.add(r.index)

    def triplets(self) -> list[HOITriplet]:
        return [r.to_triplet() for r in self.records]


# --- envelope ---------------------------------------------------------------

def _block_span(raw: str, tag: str) -> Optional[tuple[int, int, int, int]]:
    """(open_start, inner_start, inner_end, close_end) of the single ``tag`` block."""
    opens = [m.start() for m in re.finditer(f"<{tag}>", raw)]
    closes = [m.start() for m in re.finditer(f"</{tag}>", raw)]
    if len(opens) > 1 or len(closes) > 1:
        raise DuplicateBlock(tag)
    if not opens and not closes:
        return None
    if len(opens) != 1 or len(closes) != 1 or closes[0] < opens[0]:
        raise UnclosedBlock(tag)
    o, c = opens[0], closes[0]
    return o, o + len(tag) + 2, c, c + len(tag) + 3


def extract_block(raw: str, tag: str) -> str:
    """Inner text of the single ``<tag>`` block, ignoring the rest of ``raw``."""
    span = _block_span(raw, tag)
    if span is None:
        raise MissingBlock(tag)
    return raw[span[1]:span[2]]


def extract_envelope(raw: str) -> Envelope:
    """Split ``raw`` into its think and answer blocks.

    Exactly one of each is required and nothing but whitespace may sit
    outside them.
    """
    think = _block_span(raw, "think")
    answer = _block_span(raw, "answer")
    if think is None:
        raise MissingBlock("think")
    if answer is None:
        raise MissingBlock("answer")
    first, second = sorted([think, answer])
    if second[0] < first[3]:
        raise StrayText("think and answer blocks overlap")
    outside = raw[:first[0]] + raw[first[3]:second[0]] + raw[second[3]:]
    if outside.strip():
        raise StrayText(f"text outside blocks: {outside.strip()[:40]!r}")
    return Envelope(think=raw[think[1]:think[2]], answer=raw[answer[1]:answer[2]])


# --- boxes and numbers --------------------------------------------------------

_NUM = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_NUM_RE = re.compile(rf"\s*({_NUM})\s*")


def _parse_box(token: str) -> BBox:
    tok = token.strip()
    if not (tok.startswith("[") and tok.endswith("]")):
        raise MalformedBox(f"expected [x1,y1,x2,y2], got {tok[:40]!r}")
    parts = tok[1:-1].split(",")
    if len(parts) != 4:
        raise MalformedBox(f"expected 4 coordinates, got {len(parts)} in {tok!r}")
    vals = []
    for p in parts:
        m = _NUM_RE.fullmatch(p)
        if m is None:
            raise MalformedBox(f"non-numeric coordinate {p.strip()!r} in {tok!r}")
        vals.append(float(m.group(1)))
    try:
        return BBox(*vals)
    except ValueError as e:
        raise MalformedBox(f"invalid box {tok!r}: {e}") from None


def _fmt_num(x: float) -> str:
    return repr(float(x))


def _fmt_box(b: BBox) -> str:
    return "[" + ",".join(_fmt_num(v) for v in b.as_list()) + "]"


def _split_top_level(text: str) -> list[str]:
    """Split on commas that are not inside square brackets."""
    items, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    items.append("".join(cur))
    return items


_LABEL_FORBIDDEN = set("[],;:<>")


def _parse_label(token: str, err: type[ProtocolError]) -> str:
    tok = token.strip()
    if not tok or any(ch in _LABEL_FORBIDDEN for ch in tok):
        raise err(f"bad label {tok[:40]!r}")
    try:
        return normalize_label(tok)
    except ValueError:
        raise err(f"bad label {tok[:40]!r}") from None


# --- turn 1 -----------------------------------------------------------------

def parse_turn1(answer_text: str) -> Turn1Decision:
    segments = answer_text.split(";")
    if len(segments) == 1:
        raise MissingSeparator("turn-1 answer has no ';' between detections and tools")
    if len(segments) > 2:
        raise MultipleSeparators(f"turn-1 answer has {len(segments) - 1} ';' separators")
    det_text, tool_text = segments

    detections: list[tuple[str, BBox]] = []
    if det_text.strip():
        items = [it.strip() for it in _split_top_level(det_text)]
        if items and items[-1] == "":
            items.pop()  # tolerate a trailing comma
        i = 0
        while i < len(items):
            label_tok = items[i]
            if label_tok.startswith("["):
                raise MalformedBox(f"box {label_tok[:40]!r} where a label was expected")
            label = _parse_label(label_tok, MalformedBox)
            if i + 1 >= len(items):
                raise DanglingLabel(f"label {label!r} has no box")
            detections.append((label, _parse_box(items[i + 1])))
            i += 2

    tools: list[ToolKind] = []
    for tok in tool_text.split(","):
        if not tok.strip():
            continue
        kind = ToolKind.parse(tok)
        if kind not in tools:
            tools.append(kind)
    return Turn1Decision(tuple(detections), tuple(tools))


def render_turn1(d: Turn1Decision) -> str:
    det = ", ".join(f"{lbl}, {_fmt_box(b)}" for lbl, b in d.detections)
    tools = ", ".join(t.render() for t in d.tools)
    return f"{det} ; {tools}" if det else f"; {tools}"


# --- turn 2 -----------------------------------------------------------------

_RECORD_START = re.compile(r"(?:^|[,\n])\s*(\d+)\s*:")


def _parse_record_body(body: str, ordinal: int, index: int) -> Turn2Record:
    items = [it.strip() for it in _split_top_level(body)]
    if items and items[-1] == "":
        items.pop()
    if len(items) != 4:
        raise MalformedRecord(ordinal, f"expected 'verb, object, [box], [box]', got {len(items)} fields")
    try:
        verb = _parse_label(items[0], ProtocolError)
        obj = _parse_label(items[1], ProtocolError)
        hbox = _parse_box(items[2])
        obox = _parse_box(items[3])
    except ProtocolError as e:
        raise MalformedRecord(ordinal, str(e)) from None
    return Turn2Record(index, verb, obj, hbox, obox)


def parse_turn2(answer_text: str, strict: bool = True) -> Turn2Answer:
    """Parse turn-2 HOI records.

    With ``strict=False`` malformed records and repeated indices are
    skipped instead of raising. An answer without any records raises
    :class:`EmptyAnswer` in both modes.
    """
    text = answer_text.strip()
    if not text:
        raise EmptyAnswer()
    starts = list(_RECORD_START.finditer(text))
    if not starts:
        if strict:
            raise MalformedRecord(1, "no 'idx:' record header")
        raise EmptyAnswer()
    records: list[Turn2Record] = []
    seen: set[int] = set()
    if text[:starts[0].start()].strip() and strict:
        raise MalformedRecord(1, "text before the first record")
    for k, m in enumerate(starts):
        ordinal = k + 1
        end = starts[k + 1].start() if k + 1 < len(starts) else len(text)
        body = text[m.end():end]
        index = int(m.group(1))
        try:
            if index < 1:
                raise MalformedRecord(ordinal, f"index {index} is not positive")
            if index in seen:
                raise DuplicateIndex(index)
            rec = _parse_record_body(body, ordinal, index)
        except ProtocolError:
            if strict:
                raise
            continue
        seen.add(index)
        records.append(rec)
    if not records:
        raise EmptyAnswer()
    return Turn2Answer(tuple(records))


def render_turn2(a: Turn2Answer) -> str:
    return ", ".join(
        f"{r.index}: {r.verb}, {r.object}, {_fmt_box(r.human_box)}, {_fmt_box(r.object_box)}"
        for r in a.records
    )


def render_envelope(think: str, answer: str) -> str:
    return f"<think>{think}</think><answer>{answer}</answer>"


def check_format(turn1_raw: str, turn2_raw: str) -> bool:
    try:
        parse_turn1(extract_envelope(turn1_raw).answer)
        answer2 = extract_envelope(turn2_raw).answer
    except ProtocolError:
        return False
    try:
        parse_turn2(answer2)
    except EmptyAnswer:
        return True
    except ProtocolError:
        return False
    return True


def predictions_from_turn2(turn2_raw: str, strict: bool = True) -> list[HOITriplet]:
    """Triplets from the answer block alone; empty on any parse failure.

    The think block is not required here so that a damaged reasoning
    block costs only the format reward.
    """
    try:
        return parse_turn2(extract_block(turn2_raw, "answer"), strict=strict).triplets()
    except ProtocolError:
        return []

"""Trajectory filtering and SFT/RL corpus construction."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Protocol, Sequence

from .core import BBox, box_in_frame
from .orchestrator.workflow import Trajectory
from .protocol import (EmptyAnswer, ProtocolError, Turn1Decision, extract_block, extract_envelope,
                       parse_turn1, parse_turn2)
from .vocab import Vocabulary

log = logging.getLogger(__name__)

PACKAGED_FIELDS = ("detected_objects", "selected_tools", "first_turn_output", "second_turn_output",
                   "first_turn_prompt", "second_turn_prompt", "image_id")


@dataclass(frozen=True)
class PackagedTrajectory:
    detected_objects: tuple[tuple[str, tuple[float, ...]], ...]
    selected_tools: tuple[str, ...]
    first_turn_output: str
    second_turn_output: str
    first_turn_prompt: str
    second_turn_prompt: str
    image_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "detected_objects": [[l, list(b)] for l, b in self.detected_objects],
            "selected_tools": list(self.selected_tools),
            "first_turn_output": self.first_turn_output,
            "second_turn_output": self.second_turn_output,
            "first_turn_prompt": self.first_turn_prompt,
            "second_turn_prompt": self.second_turn_prompt,
            "image_id": self.image_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PackagedTrajectory":
        extra = set(d) - set(PACKAGED_FIELDS)
        if extra:
            raise ValueError(f"unexpected packaged-trajectory fields: {sorted(extra)}")
        return cls(
            detected_objects=tuple((l, tuple(float(x) for x in b)) for l, b in d["detected_objects"]),
            selected_tools=tuple(d["selected_tools"]),
            first_turn_output=d["first_turn_output"],
            second_turn_output=d["second_turn_output"],
            first_turn_prompt=d["first_turn_prompt"],
            second_turn_prompt=d["second_turn_prompt"],
            image_id=str(d["image_id"]),
        )

    @classmethod
    def from_trajectory(cls, t: Trajectory) -> "PackagedTrajectory":
        return cls(
            detected_objects=tuple((l, tuple(b.as_list())) for l, b in t.detections),
            selected_tools=tuple(k.value for k in t.selected_tools),
            first_turn_output=t.turn1_raw or "",
            second_turn_output=t.turn2_raw or "",
            first_turn_prompt=t.turn1_prompt,
            second_turn_prompt=t.turn2_prompt,
            image_id=t.image_id,
        )

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.image_id, self.first_turn_output, self.second_turn_output)


@dataclass(frozen=True)
class Violation:
    kind: str        # ObjectConstraint | VerbConstraint | BoundingBox | Format
    detail: str


@dataclass(frozen=True)
class Verdict:
    accept: bool
    score: float
    reasons: tuple[str, ...] = ()


class JudgeBackend(Protocol):
    def __call__(self, t: PackagedTrajectory) -> Verdict: ...


def _answer(raw: str, turn: int, violations: list[Violation]) -> Optional[str]:
    """The answer block of one turn; envelope problems become Format violations."""
    try:
        return extract_envelope(raw).answer
    except ProtocolError as e:
        violations.append(Violation("Format", f"turn {turn}: {type(e).__name__}: {e}"))
    try:
        return extract_block(raw, "answer")
    except ProtocolError:
        return None


def _parse_outputs(t: PackagedTrajectory) -> tuple[Optional[Turn1Decision], list, list[Violation]]:
    violations: list[Violation] = []
    decision = None
    records: list = []
    a1 = _answer(t.first_turn_output, 1, violations)
    if a1 is not None:
        try:
            decision = parse_turn1(a1)
        except ProtocolError as e:
            violations.append(Violation("Format", f"turn 1: {type(e).__name__}: {e}"))
    a2 = _answer(t.second_turn_output, 2, violations)
    if a2 is not None:
        try:
            records = list(parse_turn2(a2).records)
        except EmptyAnswer:
            pass
        except ProtocolError as e:
            violations.append(Violation("Format", f"turn 2: {type(e).__name__}: {e}"))
    return decision, records, violations


def validate_constraints(t: PackagedTrajectory, vocab: Vocabulary,
                         image_dims: tuple[float, float]) -> list[Violation]:
    """Every hard-rule violation of ``t``; an empty list means it passes."""
    width, height = image_dims
    decision, records, violations = _parse_outputs(t)

    objects: list[tuple[str, str]] = []   # (label, where)
    boxes: list[tuple[BBox, str]] = []
    if decision is not None:
        for lbl, b in decision.detections:
            objects.append((lbl, "turn 1 detection"))
            boxes.append((b, f"turn 1 {lbl}"))
    for r in records:
        objects.append((r.object, f"record {r.index}"))
        boxes.append((r.human_box, f"record {r.index} human"))
        boxes.append((r.object_box, f"record {r.index} object"))
        if r.object in vocab.objects and not vocab.is_valid(r.verb, r.object):
            violations.append(Violation("VerbConstraint",
                                        f"record {r.index}: {r.verb!r} is not a valid verb for {r.object!r}"))

    for lbl, where in objects:
        if lbl != "person" and lbl not in vocab.objects:
            violations.append(Violation("ObjectConstraint", f"{where}: {lbl!r} is not in the object vocabulary"))
    for b, where in boxes:
        if not box_in_frame(b, width, height):
            violations.append(Violation("BoundingBox",
                                        f"{where}: {b.as_list()} outside the {width}x{height} original image"))
    order = {"Format": 0, "ObjectConstraint": 1, "VerbConstraint": 2, "BoundingBox": 3}
    return sorted(violations, key=lambda v: order[v.kind])


def select_solvable(groups: Mapping[str, Sequence[Trajectory]], vocab: Vocabulary) -> dict[str, list[Trajectory]]:
    """Keep images where some rollout has TP >= 1, and only such rollouts that pass the hard rules."""
    kept: dict[str, list[Trajectory]] = {}
    for image_id, trajs in groups.items():
        winners = [t for t in trajs if t.reward is not None and t.reward.matching.tp >= 1]
        if not winners:
            continue
        ok = [t for t in winners
              if not validate_constraints(PackagedTrajectory.from_trajectory(t), vocab, (t.width, t.height))]
        if ok:
            kept[image_id] = ok
    return kept


def primary_category(t: PackagedTrajectory) -> tuple[str, str]:
    """Category of the first turn-2 record; ("", "") when there is none."""
    try:
        recs = parse_turn2(extract_block(t.second_turn_output, "answer"), strict=False).records
    except ProtocolError:
        return ("", "")
    return (recs[0].verb, recs[0].object)


class RuleJudge:
    """Stand-in validator.

    Accepts iff the trajectory has a true positive, breaks no hard rule,
    and its turn-2 think block mentions every predicted object label.
    ``true_positives`` maps :attr:`PackagedTrajectory.key` to TP counts;
    without it the TP check is skipped (callers pass solvable rollouts).
    """

    def __init__(self, vocab: Vocabulary, image_dims: Mapping[str, tuple[float, float]],
                 true_positives: Optional[Mapping[tuple[str, str, str], int]] = None):
        self.vocab = vocab
        self.image_dims = image_dims
        self.true_positives = true_positives

    def __call__(self, t: PackagedTrajectory) -> Verdict:
        reasons = []
        if self.true_positives is not None and self.true_positives.get(t.key, 0) < 1:
            reasons.append("no true positive")
        dims = self.image_dims.get(t.image_id)
        if dims is None:
            reasons.append("unknown image size")
        else:
            reasons.extend(f"{v.kind}: {v.detail}" for v in validate_constraints(t, self.vocab, dims))
        try:
            think = extract_block(t.second_turn_output, "think").lower()
            recs = parse_turn2(extract_block(t.second_turn_output, "answer"), strict=False).records
        except ProtocolError as e:
            reasons.append(f"unparseable turn 2: {e}")
        else:
            for obj in sorted({r.object for r in recs}):
                if obj not in think:
                    reasons.append(f"think block never mentions {obj!r}")
        return Verdict(not reasons, 0.0 if reasons else 1.0, tuple(reasons))


@dataclass
class SplitReport:
    sft_categories: dict[str, int] = field(default_factory=dict)
    rl_categories: dict[str, int] = field(default_factory=dict)
    judged: int = 0
    accepted: int = 0
    duplicates: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _round_robin(indices: Sequence[int], cats: Sequence[tuple[str, str]], target: int) -> list[int]:
    buckets: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i in indices:
        buckets[cats[i]].append(i)
    order = sorted(buckets)
    pos = {c: 0 for c in order}
    chosen: list[int] = []
    while len(chosen) < target:
        progressed = False
        for c in order:
            if len(chosen) >= target:
                break
            if pos[c] < len(buckets[c]):
                chosen.append(buckets[c][pos[c]])
                pos[c] += 1
                progressed = True
        if not progressed:
            break
    return chosen


def split_corpora(kept: Sequence[PackagedTrajectory], judge: JudgeBackend, sft_size: int = 6000,
                  rl_size: int = 8000) -> tuple[list[PackagedTrajectory], list[PackagedTrajectory], SplitReport]:
    """Category-balanced, disjoint SFT and RL corpora.

    Trajectories with identical image and outputs are collapsed first.
    SFT draws from judge-accepted trajectories; RL draws from everything
    left over, rejected ones included. Both use a round-robin over
    category buckets sorted by (verb, object), so per-category counts
    differ by at most one while supply lasts.
    """
    report = SplitReport()
    unique: dict[tuple[str, str, str], PackagedTrajectory] = {}
    for t in kept:
        unique.setdefault(t.key, t)
    report.duplicates = len(kept) - len(unique)
    kept = list(unique.values())
    cats = [primary_category(t) for t in kept]
    verdicts = [judge(t) for t in kept]
    report.judged = len(verdicts)
    accepted = [i for i, v in enumerate(verdicts) if v.accept]
    report.accepted = len(accepted)

    sft_idx = _round_robin(accepted, cats, sft_size)
    taken = set(sft_idx)
    rest = [i for i in range(len(kept)) if i not in taken]
    rl_idx = _round_robin(rest, cats, rl_size)

    if not accepted:
        report.warnings.append("judge accepted no trajectories; SFT corpus is empty")
    if len(sft_idx) < sft_size:
        report.warnings.append(f"SFT corpus has {len(sft_idx)} of {sft_size} requested trajectories")
    if len(rl_idx) < rl_size:
        report.warnings.append(f"RL corpus has {len(rl_idx)} of {rl_size} requested trajectories")
    for w in report.warnings:
        log.warning(w)

    def counts(idx: Iterable[int]) -> dict[str, int]:
        return dict(sorted(Counter(f"{cats[i][0]}|{cats[i][1]}" for i in idx).items()))

    report.sft_categories = counts(sft_idx)
    report.rl_categories = counts(rl_idx)
    return [kept[i] for i in sft_idx], [kept[i] for i in rl_idx], report


def write_corpus(path: str | Path, items: Iterable[PackagedTrajectory]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for t in items:
            f.write(json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=False) + "\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> list[PackagedTrajectory]:
    with open(path, encoding="utf-8") as f:
        return [PackagedTrajectory.from_dict(json.loads(line)) for line in f if line.strip()]

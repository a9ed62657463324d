"""Per-category AP and split-wise mAP for HOI detection.

A prediction is a true positive when its (verb, object) category equals
the ground truth's and both the human and the object box overlap their
ground-truth counterparts with IoU strictly above ``eta``. Each ground
truth can be claimed once.

Ranking: predictions are ordered by descending score (missing scores
count as 1.0); ties are broken by ``(image_id, emission index)`` so the
result does not depend on the order of images in the input.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import HOITriplet, ImageRecord, iou
from .vocab import SPLIT_TAGS, Vocabulary

DEFAULT_SCORE = 1.0
RANKING_RULE = "descending score (missing score = 1.0), ties by (image_id, emission index)"

Category = tuple[str, str]


@dataclass(frozen=True)
class EvalDataset:
    images: tuple[ImageRecord, ...]
    vocabulary: Vocabulary

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        for img in self.images:
            for t in img.ground_truth:
                if not self.vocabulary.is_valid(t.verb, t.object):
                    raise ValueError(f"image {img.image_id}: ground-truth category "
                                     f"{t.verb}|{t.object} is not in the vocabulary")


@dataclass(frozen=True)
class Detection:
    """One ranked prediction with its match outcome."""

    score: float
    image_id: str
    index: int
    tp: bool

    @property
    def rank_key(self) -> tuple[float, str, int]:
        return (-self.score, self.image_id, self.index)


@dataclass
class EvalReport:
    per_category_ap: dict[Category, float]
    split_map: dict[str, float]
    n_evaluated: int
    n_skipped: int
    split_counts: dict[str, int] = field(default_factory=dict)
    eta: float = 0.5
    ranking_rule: str = RANKING_RULE

    def to_dict(self) -> dict[str, Any]:
        return {
            "eta": self.eta,
            "ranking_rule": self.ranking_rule,
            "map": self.split_map,
            "split_counts": self.split_counts,
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
            "per_category_ap": {f"{v}|{o}": ap for (v, o), ap in sorted(self.per_category_ap.items())},
        }

    def table(self) -> str:
        cols = ["full", "seen", "unseen", "non_rare", "rare"]
        head = " | ".join(f"{c:>9}" for c in cols)
        vals = " | ".join(
            f"{100 * self.split_map[c]:9.2f}" if c in self.split_map else f"{'-':>9}" for c in cols
        )
        counts = " | ".join(f"{self.split_counts.get(c, 0):9d}" for c in cols)
        rule = "-" * len(head)
        return f"{head}\n{rule}\n{vals}\n{counts}  (categories)\n"


def _score(t: HOITriplet) -> float:
    return DEFAULT_SCORE if t.score is None else t.score


def match_predictions(image: ImageRecord, eta: float = 0.5) -> dict[Category, list[Detection]]:
    """TP/FP flags for every prediction of one image, grouped by category.

    Within a category, predictions in rank order claim the unclaimed
    ground truth with the highest ``min(IoU_h, IoU_o)`` among those that
    clear ``eta`` on both boxes.
    """
    gt_by_cat: dict[Category, list[HOITriplet]] = defaultdict(list)
    for g in image.ground_truth:
        gt_by_cat[g.category].append(g)
    preds_by_cat: dict[Category, list[tuple[int, HOITriplet]]] = defaultdict(list)
    for k, p in enumerate(image.predictions):
        preds_by_cat[p.category].append((k, p))

    out: dict[Category, list[Detection]] = {}
    for cat, preds in preds_by_cat.items():
        gts = gt_by_cat.get(cat, [])
        claimed = [False] * len(gts)
        preds = sorted(preds, key=lambda kp: (-_score(kp[1]), kp[0]))
        dets = []
        for k, p in preds:
            best, best_j = -1.0, -1
            for j, g in enumerate(gts):
                if claimed[j]:
                    continue
                ih, io = iou(p.human_box, g.human_box), iou(p.object_box, g.object_box)
                if ih > eta and io > eta and min(ih, io) > best:
                    best, best_j = min(ih, io), j
            if best_j >= 0:
                claimed[best_j] = True
            dets.append(Detection(_score(p), image.image_id, k, best_j >= 0))
        out[cat] = dets
    return out


def average_precision(detections: Sequence[Detection] | Sequence[bool], total_gt: int,
                      scores: Sequence[float] | None = None) -> float:
    """All-point interpolated AP.

    ``detections`` is either a list of :class:`Detection` (sorted here by
    rank) or plain TP flags already in rank order (``scores`` then sorts
    them, stable). Raises ``ValueError`` when ``total_gt`` is 0.
    """
    if total_gt < 1:
        raise ValueError("AP is undefined for a category without ground truth")
    if detections and isinstance(detections[0], Detection):
        flags = [d.tp for d in sorted(detections, key=lambda d: d.rank_key)]  # type: ignore[union-attr]
    else:
        flags = list(detections)  # type: ignore[arg-type]
        if scores is not None:
            order = sorted(range(len(flags)), key=lambda i: -scores[i])
            flags = [flags[i] for i in order]
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    rec = tp / total_gt
    prec = tp / (tp + fp)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    # precision envelope: running max from the right
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(dataset: EvalDataset, eta: float = 0.5) -> EvalReport:
    vocab = dataset.vocabulary
    dets: dict[Category, list[Detection]] = defaultdict(list)
    n_gt: dict[Category, int] = defaultdict(int)
    for img in dataset.images:
        for g in img.ground_truth:
            n_gt[g.category] += 1
        for cat, ds in match_predictions(img, eta).items():
            dets[cat].extend(ds)

    evaluated = sorted(c for c, n in n_gt.items() if n > 0)
    skipped = {c for c in vocab.categories if n_gt.get(c, 0) == 0}
    skipped |= {c for c in dets if n_gt.get(c, 0) == 0}
    ap = {c: average_precision(dets.get(c, []), n_gt[c]) for c in evaluated}

    by_split: dict[str, list[float]] = {"full": list(ap.values())}
    for tag in SPLIT_TAGS:
        by_split[tag] = [a for c, a in ap.items() if vocab.split_of(*c) == tag]
    split_map = {k: float(np.mean(v)) for k, v in by_split.items() if v}
    return EvalReport(
        per_category_ap=ap,
        split_map=split_map,
        n_evaluated=len(evaluated),
        n_skipped=len(skipped),
        split_counts={k: len(v) for k, v in by_split.items()},
        eta=eta,
    )


def attach_predictions(images: Iterable[ImageRecord],
                       predictions: Mapping[str, Sequence[HOITriplet]]) -> list[ImageRecord]:
    """Replace each image's predictions with ``predictions[image_id]`` (empty if absent)."""
    out = []
    for img in images:
        preds = tuple(predictions.get(img.image_id, ()))
        out.append(ImageRecord(img.image_id, img.width, img.height, img.ground_truth, preds,
                               img.image, img.query, img.extra))
    return out

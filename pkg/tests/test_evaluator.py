import json
import random

import pytest

from hoiagent.core import BBox, HOITriplet, ImageRecord
from hoiagent.evaluator import (EvalDataset, attach_predictions, average_precision, evaluate,
                                match_predictions)
from hoiagent.io import iter_jsonl
from conftest import FIXTURES, tri
from oracles import brute_ap


def load_fixture(vocab, with_preds=True):
    images = [ImageRecord.from_dict(o) for _, o in iter_jsonl(FIXTURES / "eval_dataset.jsonl")]
    if with_preds:
        preds = {o["image_id"]: [HOITriplet.from_dict(p) for p in o["predictions"]]
                 for _, o in iter_jsonl(FIXTURES / "eval_predictions.jsonl")}
        images = attach_predictions(images, preds)
    return EvalDataset(tuple(images), vocab)


def test_fixture_matches_hand_computed_table(vocab):
    expected = json.loads((FIXTURES / "eval_expected.json").read_text())
    report = evaluate(load_fixture(vocab)).to_dict()
    assert set(report["per_category_ap"]) == set(expected["per_category_ap"])
    for cat, ap in expected["per_category_ap"].items():
        assert abs(report["per_category_ap"][cat] - ap) <= 1e-9, cat
    assert set(report["map"]) == set(expected["map"])  # non_rare has no GT, so no mean
    for split, m in expected["map"].items():
        assert abs(report["map"][split] - m) <= 1e-9, split
    assert report["n_evaluated"] == 3
    assert "score" in report["ranking_rule"]


def perfect(ds):
    return EvalDataset(tuple(ImageRecord(i.image_id, i.width, i.height, i.ground_truth, i.ground_truth)
                             for i in ds.images), ds.vocabulary)


def test_perfect_and_empty_predictions(vocab):
    ds = load_fixture(vocab, with_preds=False)
    assert all(v == 1.0 for v in evaluate(perfect(ds)).split_map.values())
    assert all(v == 0.0 for v in evaluate(ds).split_map.values())


def test_eta_threshold(vocab):
    ds = load_fixture(vocab, with_preds=False)
    near = EvalDataset(tuple(
        ImageRecord(i.image_id, i.width, i.height, i.ground_truth,
                    tuple(HOITriplet(g.verb, g.object, BBox(g.human_box.x1, g.human_box.y1, g.human_box.x2,
                                                            g.human_box.y1 + 0.8 * (g.human_box.y2 - g.human_box.y1)),
                                     g.object_box) for g in i.ground_truth))
        for i in ds.images), vocab)
    assert evaluate(near, 0.5).split_map["full"] == 1.0
    assert evaluate(near, 0.9).split_map["full"] == 0.0


def test_match_examples():
    g = tri("ride", "bicycle", (0, 0, 50, 100), (30, 40, 90, 100))
    img = ImageRecord("x", 100, 100, (g,), (g,))
    assert [d.tp for d in match_predictions(img)[("ride", "bicycle")]] == [True]
    img = ImageRecord("x", 100, 100, (g,), (g, g))
    assert [d.tp for d in match_predictions(img)[("ride", "bicycle")]] == [True, False]
    half = tri("ride", "bicycle", (0, 0, 30, 36), (30, 40, 90, 100))
    assert [d.tp for d in match_predictions(ImageRecord("x", 100, 100, (g,), (half,)))[("ride", "bicycle")]] == [False]


def test_greedy_claims_highest_overlap():
    g1 = tri("ride", "bicycle", (0, 0, 50, 100), (30, 40, 90, 100))
    g2 = tri("ride", "bicycle", (0, 0, 46, 100), (30, 40, 90, 100))
    p = tri("ride", "bicycle", (0, 0, 45, 100), (30, 40, 90, 100), 0.9)
    p2 = tri("ride", "bicycle", (0, 0, 50, 100), (30, 40, 90, 100), 0.8)
    dets = match_predictions(ImageRecord("x", 100, 100, (g1, g2), (p, p2)))[("ride", "bicycle")]
    assert [d.tp for d in dets] == [True, True]


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([True, False, True], 2) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert average_precision([], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([True], 0)


def test_ap_matches_definition():
    rng = random.Random(4)
    for _ in range(300):
        flags = [rng.random() < 0.5 for _ in range(rng.randint(1, 12))]
        total = sum(flags) + rng.randint(0, 3) or 1
        assert average_precision(flags, total) == pytest.approx(brute_ap(flags, total), abs=1e-12)


def test_invariances(vocab):
    ds = load_fixture(vocab)
    base = evaluate(ds).split_map
    rev = evaluate(EvalDataset(tuple(reversed(ds.images)), vocab)).split_map
    assert rev == pytest.approx(base, abs=1e-12)
    squashed = EvalDataset(tuple(
        ImageRecord(i.image_id, i.width, i.height, i.ground_truth,
                    tuple(HOITriplet(p.verb, p.object, p.human_box, p.object_box, p.score ** 3 / 2)
                          for p in i.predictions)) for i in ds.images), vocab)
    assert evaluate(squashed).split_map == pytest.approx(base, abs=1e-12)


def test_removing_false_positive_never_lowers_ap(vocab):
    ds = load_fixture(vocab)
    base = evaluate(ds).per_category_ap
    for k, img in enumerate(ds.images):
        flags = {}
        for cat, dets in match_predictions(img).items():
            for d in dets:
                flags[d.index] = d.tp
        for idx, tp in flags.items():
            if tp:
                continue
            imgs = list(ds.images)
            imgs[k] = ImageRecord(img.image_id, img.width, img.height, img.ground_truth,
                                  tuple(p for j, p in enumerate(img.predictions) if j != idx))
            after = evaluate(EvalDataset(tuple(imgs), vocab)).per_category_ap
            assert all(after[c] >= base[c] - 1e-12 for c in base)


def test_unscored_ties_break_deterministically(vocab):
    g = tri("ride", "bicycle", (0, 0, 50, 100), (30, 40, 90, 100))
    miss = tri("ride", "bicycle", (60, 0, 100, 30), (0, 0, 10, 10))
    a = ImageRecord("a", 100, 100, (g,), (miss, g))
    b = ImageRecord("b", 100, 100, (g,), (g,))
    r1 = evaluate(EvalDataset((a, b), vocab)).per_category_ap[("ride", "bicycle")]
    r2 = evaluate(EvalDataset((b, a), vocab)).per_category_ap[("ride", "bicycle")]
    assert r1 == r2 == pytest.approx(brute_ap([False, True, True], 2))


def test_dataset_rejects_unknown_category(vocab):
    bad = ImageRecord("x", 100, 100, (tri("fly", "bicycle", (0, 0, 1, 1), (0, 0, 1, 1)),))
    with pytest.raises(ValueError):
        EvalDataset((bad,), vocab)


def test_report_table(vocab):
    text = evaluate(load_fixture(vocab)).table()
    assert "full" in text and "55.56" in text and "non_rare" in text

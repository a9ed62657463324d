import json
import subprocess
from collections import Counter
import sys

import pytest

from hoiagent.cli import main
from conftest import FIXTURES

EPS = 1e-6


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def jsonl(text):
    return [json.loads(l) for l in text.splitlines() if l.strip()]


def per_image(rows):
    return dict(Counter(r["image_id"] for r in rows))


def rollout_args(tmp_path, out, *extra):
    return ["rollout", "--images", FIXTURES / "manifest.jsonl", "--policy", FIXTURES / "policy_mock.yaml",
            "--tools", FIXTURES / "tools_mock.yaml", "--vocab", FIXTURES / "vocab_small.yaml",
            "--artifacts", tmp_path / "artifacts", "--out", out, *extra]


# --- score ------------------------------------------------------------------------

def test_score_gt_against_itself(capsys):
    code, out, _ = run(capsys, "score", "--gt", FIXTURES / "eval_dataset.jsonl", "--pred", FIXTURES / "eval_dataset.jsonl")
    rows = jsonl(out)
    assert code == 0
    assert all(r["r_hoi"] == pytest.approx(2 / (2 + EPS), abs=1e-12) for r in rows[:-1])
    assert rows[-1]["aggregate"]["n_records"] == 3


def test_score_predictions_file(capsys):
    code, out, _ = run(capsys, "score", "--gt", FIXTURES / "eval_dataset.jsonl", "--pred", FIXTURES / "eval_predictions.jsonl")
    rows = {r["image_id"]: r for r in jsonl(out)[:-1]}
    # image a: 1 of 3 preds matches 1 of 2 GT
    p, r = 1 / 3, 1 / 2
    assert rows["a"]["r_hoi"] == pytest.approx(2 * p * r / (p + r + EPS), abs=1e-12)
    assert rows["b"]["tp"] == 2 and rows["c"]["tp"] == 1


def test_score_empty_predictions(capsys, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, out, _ = run(capsys, "score", "--gt", FIXTURES / "eval_dataset.jsonl", "--pred", empty)
    rows = jsonl(out)
    assert code == 0 and all(r["total"] == 0.0 for r in rows[:-1]) and rows[-1]["aggregate"]["mean_total"] == 0.0


def test_score_malformed_line_reports_line_number(capsys, tmp_path):
    lines = [json.dumps({"image_id": "a", "predictions": []})] * 6 + ["{not json"]
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code, out, err = run(capsys, "score", "--gt", FIXTURES / "eval_dataset.jsonl", "--pred", bad)
    assert code == 2 and ":7:" in err and out == ""
    assert len(err.strip().splitlines()) == 1


def test_score_bad_config_is_usage_error(capsys, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("reward:\n  delta: 3\n")
    code, _, err = run(capsys, "score", "--gt", FIXTURES / "eval_dataset.jsonl", "--pred",
                       FIXTURES / "eval_dataset.jsonl", "--config", cfg)
    assert code == 1 and "delta" in err
    cfg.write_text("reward:\n  gamma: 1\n")
    assert run(capsys, "score", "--gt", FIXTURES / "eval_dataset.jsonl", "--pred",
               FIXTURES / "eval_dataset.jsonl", "--config", cfg)[0] == 1


def test_score_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "score", "--gt", tmp_path / "nope.jsonl", "--pred", FIXTURES / "eval_dataset.jsonl")
    assert code == 2 and "nope.jsonl" in err


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["score", "--gt", "x"])
    assert e.value.code == 1


# --- eval ---------------------------------------------------------------------------

def test_eval_fixture(capsys):
    expected = json.loads((FIXTURES / "eval_expected.json").read_text())
    code, out, _ = run(capsys, "eval", "--dataset", FIXTURES / "eval_dataset.jsonl", "--pred",
                       FIXTURES / "eval_predictions.jsonl", "--vocab", FIXTURES / "vocab_small.yaml")
    report = json.loads(out)
    assert code == 0
    for k, v in expected["map"].items():
        assert report["map"][k] == pytest.approx(v, abs=1e-9)


def test_eval_perfect_and_eta(capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--dataset", FIXTURES / "eval_dataset.jsonl", "--pred",
                       FIXTURES / "eval_dataset.jsonl", "--vocab", FIXTURES / "vocab_small.yaml")
    assert set(json.loads(out)["map"].values()) == {1.0}
    # near misses: shrink every predicted human box to 80% height (IoU 0.8)
    near = tmp_path / "near.jsonl"
    with open(near, "w") as f:
        for line in (FIXTURES / "eval_dataset.jsonl").read_text().splitlines():
            rec = json.loads(line)
            preds = []
            for g in rec["ground_truth"]:
                x1, y1, x2, y2 = g["human_box"]
                preds.append({**g, "human_box": [x1, y1, x2, y1 + 0.8 * (y2 - y1)]})
            f.write(json.dumps({"image_id": rec["image_id"], "predictions": preds}) + "\n")
    args = ["eval", "--dataset", FIXTURES / "eval_dataset.jsonl", "--pred", near, "--vocab", FIXTURES / "vocab_small.yaml"]
    assert json.loads(run(capsys, *args)[1])["map"]["full"] == 1.0
    assert json.loads(run(capsys, *args, "--eta", 0.9)[1])["map"]["full"] == 0.0


def test_eval_table(capsys):
    code, out, _ = run(capsys, "eval", "--dataset", FIXTURES / "eval_dataset.jsonl", "--pred",
                       FIXTURES / "eval_predictions.jsonl", "--vocab", FIXTURES / "vocab_small.yaml",
                       "--format", "table")
    assert code == 0 and "unseen" in out and "55.56" in out


# --- rollout --------------------------------------------------------------------------

def test_rollout_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, *rollout_args(tmp_path, a, "--seed", 7))[0] == 0
    assert run(capsys, *rollout_args(tmp_path, b, "--seed", 7))[0] == 0
    assert a.read_bytes() == b.read_bytes()
    rows = jsonl(a.read_text())
    assert len(rows) == 8
    assert per_image(rows) == {"scene": 4, "scene2": 4}
    c = tmp_path / "c.jsonl"
    run(capsys, *rollout_args(tmp_path, c, "--seed", 8))
    assert [r["seed"] for r in jsonl(c.read_text())] != [r["seed"] for r in rows]


def test_rollout_group_size_flag(capsys, tmp_path):
    out = tmp_path / "t.jsonl"
    assert run(capsys, *rollout_args(tmp_path, out, "--group-size", 2))[0] == 0
    assert per_image(jsonl(out.read_text())) == {"scene": 2, "scene2": 2}


def test_rollout_missing_mock_is_usage_error(capsys, tmp_path):
    args = rollout_args(tmp_path, tmp_path / "t.jsonl")
    args[args.index("--policy") + 1] = tmp_path / "missing.yaml"
    code, _, err = run(capsys, *args)
    assert code == 1 and "missing.yaml" in err


def test_rollout_backend_failure_exits_three(capsys, tmp_path):
    pol = tmp_path / "down.yaml"
    pol.write_text("policy:\n  fail: transport\n")
    args = rollout_args(tmp_path, tmp_path / "t.jsonl", "--group-size", 1)
    args[args.index("--policy") + 1] = pol
    code, _, err = run(capsys, *args)
    assert code == 3 and "failed" in err


def test_rollout_rewards_feed_advantages(capsys, tmp_path):
    traj, rewards = tmp_path / "t.jsonl", tmp_path / "r.jsonl"
    assert run(capsys, *rollout_args(tmp_path, traj, "--rewards-out", rewards))[0] == 0
    code, out, _ = run(capsys, "advantages", "--rewards", rewards)
    rows = jsonl(out)
    assert code == 0 and len(rows) == 8
    scene2 = [r["advantage"] for r in rows if r["query_id"] == "scene2"]
    assert scene2 == [0.0] * 4


# --- filter ---------------------------------------------------------------------------

def test_filter_pipeline(capsys, tmp_path):
    traj = tmp_path / "t.jsonl"
    run(capsys, *rollout_args(tmp_path, traj))
    code, out, err = run(capsys, "filter", "--trajectories", traj, "--vocab", FIXTURES / "vocab_small.yaml",
                         "--sft-size", 2, "--rl-size", 2, "--out-dir", tmp_path / "corpora")
    manifest = json.loads(out)
    assert code == 0
    assert manifest["counts"]["solvable_images"] == 2
    assert manifest["counts"]["sft"] == 2 and manifest["sft_categories"] == {"kick|ball": 1, "ride|bicycle": 1}
    sft = jsonl((tmp_path / "corpora" / "sft.jsonl").read_text())
    rl = jsonl((tmp_path / "corpora" / "rl.jsonl").read_text())
    assert {json.dumps(x, sort_keys=True) for x in sft}.isdisjoint(json.dumps(x, sort_keys=True) for x in rl)
    assert json.loads((tmp_path / "corpora" / "manifest.json").read_text()) == manifest


def test_filter_all_failing(capsys, tmp_path):
    traj = tmp_path / "t.jsonl"
    pol = tmp_path / "p.yaml"
    pol.write_text("policy:\n  default:\n    turn1: nonsense\n    turn2: nonsense\n")
    args = rollout_args(tmp_path, traj)
    args[args.index("--policy") + 1] = pol
    run(capsys, *args)
    code, out, err = run(capsys, "filter", "--trajectories", traj, "--vocab", FIXTURES / "vocab_small.yaml",
                         "--out-dir", tmp_path / "c")
    assert code == 0 and json.loads(out)["counts"]["sft"] == 0 and "warning" in err


def test_filter_sizes_exceed_supply(capsys, tmp_path):
    traj = tmp_path / "t.jsonl"
    run(capsys, *rollout_args(tmp_path, traj))
    code, out, err = run(capsys, "filter", "--trajectories", traj, "--vocab", FIXTURES / "vocab_small.yaml",
                         "--out-dir", tmp_path / "c")
    m = json.loads(out)
    assert code == 0 and m["counts"]["sft"] < 6000 and "6000" in err


# --- advantages -------------------------------------------------------------------------

def write_rewards(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_advantages_example_and_default_beta(capsys, tmp_path):
    f = tmp_path / "r.jsonl"
    write_rewards(f, [{"query_id": "q", "rollout_index": i, "reward": r} for i, r in enumerate([1, 0, 0, 1])])
    code, out, _ = run(capsys, "advantages", "--rewards", f)
    rows = jsonl(out)
    assert code == 0 and [r["advantage"] for r in rows] == [1.0, -1.0, -1.0, 1.0]
    assert {r["beta"] for r in rows} == {0.04}
    cfg = tmp_path / "c.yaml"
    cfg.write_text("grpo:\n  beta: 0.1\n")
    assert {r["beta"] for r in jsonl(run(capsys, "advantages", "--rewards", f, "--config", cfg)[1])} == {0.1}
    assert {r["beta"] for r in jsonl(run(capsys, "advantages", "--rewards", f, "--config", cfg,
                                         "--beta", 0.2)[1])} == {0.2}


def test_advantages_with_traces(capsys, tmp_path):
    f = tmp_path / "r.jsonl"
    tr = {"logp_theta": [-1.0], "logp_old": [-1.0], "logp_ref": [-1.0]}
    write_rewards(f, [{"query_id": "q", "rollout_index": 0, "reward": 1, **tr},
                      {"query_id": "q", "rollout_index": 1, "reward": 0, **tr}])
    rows = jsonl(run(capsys, "advantages", "--rewards", f)[1])
    assert [r["objective"] for r in rows] == [0.0, 0.0] and rows[0]["kl"] == 0.0


def test_advantages_single_rollout_group(capsys, tmp_path):
    f = tmp_path / "r.jsonl"
    write_rewards(f, [{"query_id": "q", "reward": 1}])
    code, _, err = run(capsys, "advantages", "--rewards", f)
    assert code == 2 and "at least 2" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hoiagent.cli", "advantages", "--rewards", tmp_path / "none.jsonl"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""
    assert len(proc.stderr.strip().splitlines()) == 1

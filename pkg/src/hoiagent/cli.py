"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 backend failure. Data goes to stdout (or ``--out``), diagnostics to
stderr as single lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, TextIO

from .core import HOITriplet, ImageRecord
from .datagen import PackagedTrajectory, RuleJudge, select_solvable, split_corpora, write_corpus
from .evaluator import EvalDataset, attach_predictions, evaluate
from .grpo import DEFAULT_BETA, LogprobTrace, RolloutGroup, advantages, grpo_objective
from .io import DataError, build_config, dump_line, iter_jsonl, load_structured
from .orchestrator import (ArtifactStore, HttpPolicyBackend, HttpToolBackend, Query, RolloutConfig,
                           ScriptedPolicy, ScriptedTool, ToolRouter, Trajectory, run_group)
from .reward import (EmbeddingError, ExactMatchProvider, HttpEmbeddingClient, RewardBreakdown,
                     RewardConfig, ToolInvocation, embedding_provider, hoi_reward, total_reward,
                     zero_breakdown)
from .vocab import VocabularyError, load_vocabulary

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

ENV_POLICY = "HOIAGENT_POLICY_URL"
ENV_TOOLS = "HOIAGENT_TOOLS_URL"
ENV_EMBED = "HOIAGENT_EMBED_URL"

log = logging.getLogger("hoiagent")


class UsageError(Exception):
    pass


class BackendError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


@contextmanager
def _output(path: Optional[str]) -> Iterator[TextIO]:
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as f:
            yield f


def _load_config(path: Optional[str]) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = load_structured(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    return doc


def _reward_config(conf: dict[str, Any]) -> RewardConfig:
    try:
        return build_config(RewardConfig, conf.get("reward"))
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad reward config: {e}") from None


def _similarity(args: argparse.Namespace):
    if getattr(args, "similarity", "exact") == "exact":
        return ExactMatchProvider()
    url = args.embed_url or os.environ.get(ENV_EMBED)
    if not url:
        raise UsageError(f"--similarity embedding needs --embed-url or ${ENV_EMBED}")
    return embedding_provider(HttpEmbeddingClient(url))


def _vocab(path: str):
    try:
        return load_vocabulary(path)
    except OSError as e:
        raise DataError(f"{path}: cannot open: {e.strerror}") from None
    except (VocabularyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def _record(path: str, n: int, obj: dict[str, Any]) -> ImageRecord:
    try:
        return ImageRecord.from_dict(obj)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}:{n}: bad image record: {e}") from None


def _is_trajectory(obj: dict[str, Any]) -> bool:
    return "turn2" in obj or "turn1" in obj


# --- score ------------------------------------------------------------------

def cmd_score(args: argparse.Namespace) -> int:
    conf = _load_config(args.config)
    cfg = _reward_config(conf)
    sim = _similarity(args)

    gt: dict[str, ImageRecord] = {}
    for n, obj in iter_jsonl(args.gt):
        rec = _record(args.gt, n, obj)
        gt[rec.image_id] = rec

    preds: dict[str, list[dict[str, Any]]] = defaultdict(list)
    for n, obj in iter_jsonl(args.pred):
        if "image_id" not in obj:
            raise DataError(f"{args.pred}:{n}: record has no image_id")
        obj["_line"] = n
        preds[str(obj["image_id"])].append(obj)
    for extra in sorted(set(preds) - set(gt)):
        log.warning("prediction for unknown image %s ignored", extra)

    rows = []
    for image_id, rec in gt.items():
        entries = preds.get(image_id) or [None]
        for obj in entries:
            row: dict[str, Any] = {"image_id": image_id}
            if obj is None:
                br = zero_breakdown(len(rec.ground_truth))
            elif _is_trajectory(obj):
                try:
                    t = Trajectory.from_dict(obj)
                except (KeyError, TypeError, ValueError) as e:
                    raise DataError(f"{args.pred}:{obj['_line']}: bad trajectory: {e}") from None
                row["rollout_index"] = t.rollout_index
                br = total_reward(t.turn1_raw or "", t.turn2_raw or "", rec.ground_truth,
                                  [ToolInvocation(e.tool, e.success) for e in t.tool_log], cfg, sim)
            else:
                # a ground-truth style record scores its predictions, or its own GT if it has none
                key = "predictions" if "predictions" in obj else "ground_truth"
                try:
                    triplets = [HOITriplet.from_dict(d) for d in obj.get(key, [])]
                except (KeyError, TypeError, ValueError) as e:
                    raise DataError(f"{args.pred}:{obj['_line']}: bad triplet: {e}") from None
                r_hoi, p, r, m = hoi_reward(triplets, rec.ground_truth, cfg, sim)
                br = RewardBreakdown(r_hoi, 0.0, 0.0, r_hoi, p, r, m, len(triplets), len(rec.ground_truth))
            row.update(br.to_dict())
            rows.append(row)

    def mean(key: str) -> float:
        return sum(r[key] for r in rows) / len(rows) if rows else 0.0

    tp = sum(r["tp"] for r in rows)
    npred = sum(r["n_pred"] for r in rows)
    ngt = sum(r["n_gt"] for r in rows)
    agg = {
        "n_records": len(rows),
        "mean_r_hoi": mean("r_hoi"),
        "mean_r_format": mean("r_format"),
        "mean_r_tool": mean("r_tool"),
        "mean_total": mean("total"),
        "mean_precision": mean("precision"),
        "mean_recall": mean("recall"),
        "micro_precision": tp / npred if npred else 0.0,
        "micro_recall": tp / ngt if ngt else 0.0,
    }
    with _output(args.out) as out:
        for r in rows:
            out.write(dump_line(r))
        out.write(dump_line({"aggregate": agg}))
    return EXIT_OK


# --- eval -------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    vocab = _vocab(args.vocab)
    images = [_record(args.dataset, n, obj) for n, obj in iter_jsonl(args.dataset)]
    if args.pred is not None:
        preds: dict[str, list[HOITriplet]] = defaultdict(list)
        for n, obj in iter_jsonl(args.pred):
            try:
                key = "predictions" if "predictions" in obj else "ground_truth"
                preds[str(obj["image_id"])].extend(HOITriplet.from_dict(d) for d in obj.get(key, []))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{args.pred}:{n}: bad prediction record: {e}") from None
        images = attach_predictions(images, preds)
    try:
        dataset = EvalDataset(tuple(images), vocab)
    except ValueError as e:
        raise DataError(str(e)) from None
    report = evaluate(dataset, args.eta)
    with _output(args.out) as out:
        if args.format == "table":
            out.write(report.table())
        else:
            out.write(dump_line(report.to_dict()))
    return EXIT_OK


# --- rollout ----------------------------------------------------------------

def _policy_backend(spec: Optional[str]):
    spec = spec or os.environ.get(ENV_POLICY)
    if not spec:
        raise UsageError(f"no policy backend: pass --policy or set ${ENV_POLICY}")
    if spec.startswith(("http://", "https://")):
        return HttpPolicyBackend(spec)
    if not Path(spec).is_file():
        raise UsageError(f"policy mock script {spec} not found")
    try:
        return ScriptedPolicy.from_file(spec)
    except (OSError, ValueError) as e:
        raise UsageError(f"bad policy mock script {spec}: {e}") from None


def _tool_backend(spec: Optional[str], store: ArtifactStore):
    spec = spec or os.environ.get(ENV_TOOLS)
    if not spec:
        return ToolRouter(store, None)
    if spec.startswith(("http://", "https://")):
        return ToolRouter(store, HttpToolBackend(spec, store))
    if not Path(spec).is_file():
        raise UsageError(f"tool mock script {spec} not found")
    try:
        return ToolRouter(store, ScriptedTool.from_file(spec))
    except (OSError, ValueError) as e:
        raise UsageError(f"bad tool mock script {spec}: {e}") from None


def cmd_rollout(args: argparse.Namespace) -> int:
    conf = _load_config(args.config)
    reward_cfg = _reward_config(conf)
    try:
        cfg = build_config(RolloutConfig, conf.get("rollout"), group_size=args.group_size,
                           master_seed=args.seed, parallelism=args.workers,
                           want_logprobs=True if args.want_logprobs else None)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad rollout config: {e}") from None
    policy = _policy_backend(args.policy)
    store = ArtifactStore(args.artifacts)
    tools = _tool_backend(args.tools, store)
    vocab = _vocab(args.vocab) if args.vocab else None
    sim = _similarity(args)
    base = Path(args.images).parent

    queries = []
    for n, obj in iter_jsonl(args.images):
        rec = _record(args.images, n, obj)
        if rec.image is None:
            raise DataError(f"{args.images}:{n}: record has no 'image' path")
        img = Path(rec.image)
        img = img if img.is_absolute() else base / img
        queries.append(Query(rec.image_id, str(img), rec.width, rec.height,
                             rec.query or Query.text, rec.ground_truth))

    failed = 0
    with _output(args.out) as out, _output(args.rewards_out if args.rewards_out else os.devnull) as rout:
        for q in queries:
            group, trajs = run_group(q, policy, tools, cfg, vocab, reward_cfg, sim,
                                     reference=policy if cfg.want_logprobs else None)
            for i, t in enumerate(trajs):
                if t.failure and t.failure.startswith("Transport"):
                    failed += 1
                    print(f"rollout {q.image_id}#{t.rollout_index} failed: {t.failure}", file=sys.stderr)
                out.write(dump_line(t.to_dict()))
                row: dict[str, Any] = {"query_id": q.image_id, "rollout_index": t.rollout_index,
                                       "reward": group.rewards[i]}
                if group.logprob_traces is not None:
                    tr = group.logprob_traces[i]
                    row.update(logp_theta=list(tr.logp_theta), logp_old=list(tr.logp_old),
                               logp_ref=list(tr.logp_ref))
                rout.write(dump_line(row))
    if failed:
        raise BackendError(f"{failed} rollout(s) failed: backend unreachable after retries")
    return EXIT_OK


# --- filter -----------------------------------------------------------------

def cmd_filter(args: argparse.Namespace) -> int:
    vocab = _vocab(args.vocab)
    groups: dict[str, list[Trajectory]] = defaultdict(list)
    n_in = 0
    for n, obj in iter_jsonl(args.trajectories):
        try:
            groups[str(obj["image_id"])].append(Trajectory.from_dict(obj))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{args.trajectories}:{n}: bad trajectory: {e}") from None
        n_in += 1

    kept_groups = select_solvable(groups, vocab)
    kept = [PackagedTrajectory.from_trajectory(t) for ts in kept_groups.values() for t in ts]
    dims = {image_id: (ts[0].width, ts[0].height) for image_id, ts in groups.items()}
    tps = {PackagedTrajectory.from_trajectory(t).key: t.reward.matching.tp
           for ts in kept_groups.values() for t in ts if t.reward}
    sft, rl, report = split_corpora(kept, RuleJudge(vocab, dims, tps), args.sft_size, args.rl_size)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(out_dir / "sft.jsonl", sft)
    write_corpus(out_dir / "rl.jsonl", rl)
    manifest = {
        "counts": {"trajectories": n_in, "images": len(groups), "solvable_images": len(kept_groups),
                   "kept": len(kept), "sft": len(sft), "rl": len(rl)},
        "targets": {"sft": args.sft_size, "rl": args.rl_size},
        **report.to_dict(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    sys.stdout.write(dump_line(manifest))
    return EXIT_OK


# --- advantages -------------------------------------------------------------

def cmd_advantages(args: argparse.Namespace) -> int:
    conf = _load_config(args.config)
    beta = args.beta if args.beta is not None else float((conf.get("grpo") or {}).get("beta", DEFAULT_BETA))
    groups: dict[str, list[dict[str, Any]]] = defaultdict(list)
    for n, obj in iter_jsonl(args.rewards):
        try:
            obj["reward"] = float(obj["reward"])
            qid = str(obj["query_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{args.rewards}:{n}: bad reward record: {e}") from None
        obj["_line"] = n
        groups[qid].append(obj)

    with _output(args.out) as out:
        for qid, rows in groups.items():
            rows.sort(key=lambda r: int(r.get("rollout_index", 0)))
            if len(rows) < 2:
                raise DataError(f"group {qid} has {len(rows)} rollout(s); advantages need at least 2")
            rewards = [r["reward"] for r in rows]
            have_traces = all(all(k in r for k in ("logp_theta", "logp_old", "logp_ref")) for r in rows)
            kl: Optional[Sequence[float]] = None
            ratios: Optional[Sequence[float]] = None
            objective = None
            if have_traces:
                try:
                    traces = tuple(LogprobTrace(r["logp_theta"], r["logp_old"], r["logp_ref"]) for r in rows)
                except (TypeError, ValueError) as e:
                    raise DataError(f"group {qid}: {e}") from None
                res = grpo_objective(RolloutGroup(qid, rewards, traces), beta, args.clip_eps)
                adv, kl, ratios, objective = res.advantages, res.kl_per_rollout, res.ratios, res.objective_value
            else:
                adv = advantages(rewards)
            for i, r in enumerate(rows):
                line: dict[str, Any] = {"query_id": qid, "rollout_index": r.get("rollout_index", i),
                                        "reward": r["reward"], "advantage": adv[i], "beta": beta}
                if kl is not None:
                    line.update(kl=kl[i], ratio=ratios[i], objective=objective)  # type: ignore[index]
                out.write(dump_line(line))
    return EXIT_OK


# --- wiring -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hoiagent", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def similarity_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--similarity", choices=["exact", "embedding"], default="exact")
        sp.add_argument("--embed-url", default=None)

    s = sub.add_parser("score", help="reward breakdown per prediction record")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    similarity_flags(s)
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="HOI mAP per split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--pred")
    e.add_argument("--vocab", required=True)
    e.add_argument("--eta", type=float, default=0.5)
    e.add_argument("--format", choices=["json", "table"], default="json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="run two-turn rollouts against policy/tool backends")
    r.add_argument("--images", required=True)
    r.add_argument("--policy", help=f"endpoint URL or mock script (default ${ENV_POLICY})")
    r.add_argument("--tools", help=f"endpoint URL or mock script (default ${ENV_TOOLS})")
    r.add_argument("--group-size", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--vocab")
    r.add_argument("--config")
    r.add_argument("--artifacts", default="artifacts")
    r.add_argument("--workers", type=int)
    r.add_argument("--want-logprobs", action="store_true")
    r.add_argument("--out")
    r.add_argument("--rewards-out")
    similarity_flags(r)
    r.set_defaults(func=cmd_rollout)

    f = sub.add_parser("filter", help="build SFT/RL corpora from scored trajectories")
    f.add_argument("--trajectories", required=True)
    f.add_argument("--vocab", required=True)
    f.add_argument("--sft-size", type=int, default=6000)
    f.add_argument("--rl-size", type=int, default=8000)
    f.add_argument("--out-dir", default="corpora")
    f.set_defaults(func=cmd_filter)

    a = sub.add_parser("advantages", help="group-relative advantages and GRPO objective values")
    a.add_argument("--rewards", required=True)
    a.add_argument("--beta", type=float)
    a.add_argument("--clip-eps", type=float)
    a.add_argument("--config")
    a.add_argument("--out")
    a.set_defaults(func=cmd_advantages)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (BackendError, EmbeddingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())

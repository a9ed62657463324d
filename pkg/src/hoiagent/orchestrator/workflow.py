"""Two-turn rollout state machine and G-way rollout groups."""

from __future__ import annotations

import concurrent.futures as cf
import enum
import hashlib
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Any, Mapping, Optional, Sequence

from ..core import BBox, HOITriplet
from ..grpo import LogprobTrace, RolloutGroup
from ..protocol import (ProtocolError, ToolKind, Turn1Decision, extract_block, extract_envelope,
                        parse_turn1, parse_turn2, predictions_from_turn2)
from ..reward import (RewardBreakdown, RewardConfig, SimilarityProvider, ToolInvocation,
                      total_reward, zero_breakdown)
from ..vocab import Vocabulary
from .backends import Generation, Message, PolicyBackend, ToolBackend, ToolResult, ToolTimeout, TransportError
from .tools import crop_regions

log = logging.getLogger(__name__)


class WorkflowState(str, enum.Enum):
    Init = "Init"
    Turn1Requested = "Turn1Requested"
    Turn1Parsed = "Turn1Parsed"
    ToolsExecuting = "ToolsExecuting"
    Turn2Requested = "Turn2Requested"
    Turn2Parsed = "Turn2Parsed"
    Scored = "Scored"
    Failed = "Failed"


_ORDER = [WorkflowState.Init, WorkflowState.Turn1Requested, WorkflowState.Turn1Parsed,
          WorkflowState.ToolsExecuting, WorkflowState.Turn2Requested, WorkflowState.Turn2Parsed,
          WorkflowState.Scored]


class InvalidTransition(RuntimeError):
    pass


@dataclass(frozen=True)
class RolloutConfig:
    group_size: int = 4
    temperature: float = 0.8
    max_generation_tokens: int = 4096
    tool_timeout: float = 60.0
    retries: int = 2
    retry_backoff: float = 0.0
    parallelism: int = 4
    max_crops: int = 4
    want_logprobs: bool = False
    master_seed: int = 1234

    def __post_init__(self) -> None:
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if not self.tool_timeout > 0:
            raise ValueError(f"tool_timeout must be positive, got {self.tool_timeout}")
        if self.retries < 0 or self.parallelism < 1:
            raise ValueError("retries must be >= 0 and parallelism >= 1")


@dataclass(frozen=True)
class Query:
    image_id: str
    image: str
    width: float
    height: float
    text: str = "Detect all human-object interactions in the image."
    ground_truth: tuple[HOITriplet, ...] = ()


@dataclass
class ToolLogEntry:
    tool: ToolKind
    success: bool
    texts: list[str] = field(default_factory=list)
    images: list[str] = field(default_factory=list)
    error: Optional[str] = None
    latency: float = 0.0  # wall-clock; kept out of serialized logs

    def to_dict(self) -> dict[str, Any]:
        return {"tool": self.tool.value, "success": self.success, "texts": self.texts,
                "images": self.images, "error": self.error}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ToolLogEntry":
        return cls(ToolKind.parse(d["tool"]), bool(d["success"]), list(d.get("texts", [])),
                   list(d.get("images", [])), d.get("error"))


@dataclass
class Trajectory:
    image_id: str
    rollout_index: int = 0
    seed: int = 0
    width: float = 0.0
    height: float = 0.0
    state: WorkflowState = WorkflowState.Init
    history: list[WorkflowState] = field(default_factory=lambda: [WorkflowState.Init])
    failure: Optional[str] = None
    turn1_prompt: str = ""
    turn1_raw: Optional[str] = None
    turn1_decision: Optional[Turn1Decision] = None
    turn1_error: Optional[str] = None
    tool_log: list[ToolLogEntry] = field(default_factory=list)
    turn2_prompt: str = ""
    turn2_raw: Optional[str] = None
    turn2_error: Optional[str] = None
    predictions: list[HOITriplet] = field(default_factory=list)
    reward: Optional[RewardBreakdown] = None
    logprobs: dict[str, list[float]] = field(default_factory=dict)

    def advance(self, new: WorkflowState, reason: Optional[str] = None) -> None:
        if self.state is WorkflowState.Failed:
            raise InvalidTransition("Failed is absorbing")
        if new is WorkflowState.Failed:
            if not reason:
                raise InvalidTransition("Failed needs a reason")
            self.failure = reason
        elif _ORDER.index(new) != _ORDER.index(self.state) + 1:
            raise InvalidTransition(f"{self.state.value} -> {new.value}")
        self.state = new
        self.history.append(new)

    @property
    def detections(self) -> list[tuple[str, Any]]:
        return list(self.turn1_decision.detections) if self.turn1_decision else []

    @property
    def selected_tools(self) -> list[ToolKind]:
        return list(self.turn1_decision.tools) if self.turn1_decision else []

    def to_dict(self) -> dict[str, Any]:
        d1 = self.turn1_decision
        return {
            "image_id": self.image_id,
            "rollout_index": self.rollout_index,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "state": self.state.value,
            "history": [s.value for s in self.history],
            "failure": self.failure,
            "turn1": {
                "prompt": self.turn1_prompt,
                "raw": self.turn1_raw,
                "detections": [[l, b.as_list()] for l, b in d1.detections] if d1 else None,
                "tools": [t.value for t in d1.tools] if d1 else None,
                "error": self.turn1_error,
            },
            "tool_log": [e.to_dict() for e in self.tool_log],
            "turn2": {"prompt": self.turn2_prompt, "raw": self.turn2_raw, "error": self.turn2_error},
            "predictions": [t.to_dict() for t in self.predictions],
            "reward": self.reward.to_dict() if self.reward else None,
            "logprobs": self.logprobs or None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Trajectory":
        t1 = d.get("turn1") or {}
        t2 = d.get("turn2") or {}
        decision = None
        if t1.get("detections") is not None:
            decision = Turn1Decision(tuple((l, BBox.from_seq(b)) for l, b in t1["detections"]),
                                     tuple(ToolKind.parse(x) for x in t1.get("tools") or []))
        return cls(
            image_id=str(d["image_id"]),
            rollout_index=int(d.get("rollout_index", 0)),
            seed=int(d.get("seed", 0)),
            width=d.get("width", 0.0),
            height=d.get("height", 0.0),
            state=WorkflowState(d.get("state", "Init")),
            history=[WorkflowState(s) for s in d.get("history", ["Init"])],
            failure=d.get("failure"),
            turn1_prompt=t1.get("prompt", ""),
            turn1_raw=t1.get("raw"),
            turn1_decision=decision,
            turn1_error=t1.get("error"),
            tool_log=[ToolLogEntry.from_dict(e) for e in d.get("tool_log", [])],
            turn2_prompt=t2.get("prompt", ""),
            turn2_raw=t2.get("raw"),
            turn2_error=t2.get("error"),
            predictions=[HOITriplet.from_dict(p) for p in d.get("predictions", [])],
            reward=RewardBreakdown.from_dict(d["reward"]) if d.get("reward") else None,
            logprobs=dict(d.get("logprobs") or {}),
        )


# --- prompts ----------------------------------------------------------------

def _asset(name: str) -> Template:
    return Template(resources.files("hoiagent.assets").joinpath(name).read_text(encoding="utf-8"))


TURN1_TEMPLATE = _asset("turn1.txt")
TURN2_TEMPLATE = _asset("turn2.txt")
SUPPLEMENTARY_TEMPLATE = _asset("supplementary_image.txt")


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def turn1_prompt(query: Query, vocab: Optional[Vocabulary]) -> str:
    objects = ", ".join(sorted(vocab.objects)) if vocab else "(any)"
    return TURN1_TEMPLATE.substitute(query=query.text, objects=objects,
                                     width=_num(query.width), height=_num(query.height))


def turn2_prompt(query: Query, decision: Turn1Decision, vocab: Optional[Vocabulary]) -> str:
    if decision.detections:
        detected = ", ".join(f"{l} [{','.join(_num(v) for v in b.as_list())}]"
                             for l, b in decision.detections)
    else:
        detected = "(none)"
    lines = []
    for obj in sorted({l for l, _ in decision.detections if l != "person"}):
        verbs = vocab.valid_verbs(obj) if vocab else []
        lines.append(f"- {obj}: {', '.join(verbs) if verbs else '(none)'}")
    return TURN2_TEMPLATE.substitute(detected=detected, valid_actions="\n".join(lines) or "(none)",
                                     width=_num(query.width), height=_num(query.height))


def _text(v: str) -> dict[str, str]:
    return {"kind": "text", "value": v}


def _image(v: str) -> dict[str, str]:
    return {"kind": "image", "value": v}


def tool_arguments(tool: ToolKind, query: Query, decision: Turn1Decision,
                   vocab: Optional[Vocabulary], cfg: RolloutConfig) -> dict[str, Any]:
    if tool is ToolKind.image_crop:
        return {"regions": [r.as_list() for r in crop_regions(decision.detections, cfg.max_crops)]}
    if tool is ToolKind.action_description:
        verbs: set[str] = set()
        for obj in {l for l, _ in decision.detections}:
            verbs.update(vocab.valid_verbs(obj) if vocab else [])
        return {"verbs": sorted(verbs)}
    if tool is ToolKind.scene_explanation:
        return {"query": query.text}
    return {"detections": [[l, b.as_list()] for l, b in decision.detections]}


def turn2_parts(query: Query, tool_log: Sequence[ToolLogEntry], instruction: str) -> list[dict[str, str]]:
    """Original image, crops, generative images (each behind the governance note), texts, instruction."""
    parts = [_image(query.image)]
    for e in tool_log:
        if e.success and e.tool is ToolKind.image_crop:
            parts.extend(_image(r) for r in e.images)
    for e in tool_log:
        if e.success and e.tool.is_generative:
            for r in e.images:
                parts.append(_text(SUPPLEMENTARY_TEMPLATE.substitute(tool=e.tool.value)))
                parts.append(_image(r))
    for e in tool_log:
        if e.success:
            parts.extend(_text(f"[{e.tool.value}] {t}") for t in e.texts)
    parts.append(_text(instruction))
    return parts


# --- execution --------------------------------------------------------------

def derive_seed(master_seed: int, query_id: str, rollout_index: int) -> int:
    h = hashlib.sha256(f"{master_seed}:{query_id}:{rollout_index}".encode()).digest()
    return int.from_bytes(h[:4], "big") & 0x7FFFFFFF


def _call_policy(policy: PolicyBackend, messages: list[Message], cfg: RolloutConfig, seed: int,
                 metadata: dict[str, Any]) -> Generation:
    sampling = {"temperature": cfg.temperature, "max_tokens": cfg.max_generation_tokens, "seed": seed}
    last: Optional[Exception] = None
    for attempt in range(cfg.retries + 1):
        try:
            return policy.generate(messages, sampling, want_logprobs=cfg.want_logprobs, metadata=metadata)
        except TransportError as e:
            last = e
            log.warning("policy call failed (attempt %d/%d): %s", attempt + 1, cfg.retries + 1, e)
            if cfg.retry_backoff:
                time.sleep(cfg.retry_backoff * (2 ** attempt))
    raise TransportError(str(last))


def _run_tool(tools: ToolBackend, kind: ToolKind, args: dict[str, Any], images: list[str],
              cfg: RolloutConfig) -> ToolLogEntry:
    t0 = time.perf_counter()
    error: Optional[str] = None
    for attempt in range(cfg.retries + 1):
        pool = cf.ThreadPoolExecutor(max_workers=1)
        try:
            res: ToolResult = pool.submit(tools.execute, kind, args, images).result(timeout=cfg.tool_timeout)
            return ToolLogEntry(kind, res.success, list(res.texts), list(res.images), res.error,
                                time.perf_counter() - t0)
        except (cf.TimeoutError, ToolTimeout):
            error = "timeout"
            break
        except TransportError as e:
            error = f"transport: {e}"
        except Exception as e:  # tool faults never abort the rollout
            error = f"{type(e).__name__}: {e}"
            break
        finally:
            pool.shutdown(wait=False)
    return ToolLogEntry(kind, False, error=error, latency=time.perf_counter() - t0)


def run_rollout(query: Query, policy: PolicyBackend, tools: ToolBackend, cfg: RolloutConfig,
                vocab: Optional[Vocabulary] = None, rollout_index: int = 0,
                seed: Optional[int] = None, reward_cfg: Optional[RewardConfig] = None,
                sim: Optional[SimilarityProvider] = None) -> Trajectory:
    """Run one two-turn rollout and score it against ``query.ground_truth``."""
    seed = derive_seed(cfg.master_seed, query.image_id, rollout_index) if seed is None else seed
    traj = Trajectory(query.image_id, rollout_index, seed, query.width, query.height)
    meta = {"query_id": query.image_id, "rollout_index": rollout_index}
    try:
        traj.turn1_prompt = turn1_prompt(query, vocab)
        msgs: list[Message] = [{"role": "user", "parts": [_image(query.image), _text(traj.turn1_prompt)]}]
        traj.advance(WorkflowState.Turn1Requested)
        gen1 = _call_policy(policy, msgs, cfg, seed, {**meta, "turn": 1})
        traj.turn1_raw = gen1.text
        if gen1.logprobs is not None:
            traj.logprobs["turn1"] = list(gen1.logprobs)
        try:
            decision = parse_turn1(extract_envelope(gen1.text).answer)
        except ProtocolError as e:
            traj.turn1_error = f"{type(e).__name__}: {e}"
            decision = Turn1Decision()
        traj.turn1_decision = decision
        traj.advance(WorkflowState.Turn1Parsed)

        traj.advance(WorkflowState.ToolsExecuting)
        for kind in decision.tools:
            args = tool_arguments(kind, query, decision, vocab, cfg)
            traj.tool_log.append(_run_tool(tools, kind, args, [query.image], cfg))

        traj.turn2_prompt = turn2_prompt(query, decision, vocab)
        parts = turn2_parts(query, traj.tool_log, traj.turn2_prompt)
        msgs = msgs + [{"role": "assistant", "parts": [_text(gen1.text)]}, {"role": "user", "parts": parts}]
        traj.advance(WorkflowState.Turn2Requested)
        gen2 = _call_policy(policy, msgs, cfg, seed, {**meta, "turn": 2})
        traj.turn2_raw = gen2.text
        if gen2.logprobs is not None:
            traj.logprobs["turn2"] = list(gen2.logprobs)
        traj.predictions = predictions_from_turn2(gen2.text)
        if not traj.predictions:
            try:
                parse_turn2(extract_block(gen2.text, "answer"))
            except ProtocolError as e:
                traj.turn2_error = f"{type(e).__name__}: {e}"
        traj.advance(WorkflowState.Turn2Parsed)

        traj.reward = total_reward(
            gen1.text, gen2.text, query.ground_truth,
            [ToolInvocation(e.tool, e.success) for e in traj.tool_log],
            reward_cfg, sim, predictions=traj.predictions,
        )
        traj.advance(WorkflowState.Scored)
    except TransportError as e:
        traj.advance(WorkflowState.Failed, f"Transport: {e}")
        traj.reward = zero_breakdown(len(query.ground_truth))
    return traj


def run_group(query: Query, policy: PolicyBackend, tools: ToolBackend, cfg: RolloutConfig,
              vocab: Optional[Vocabulary] = None, reward_cfg: Optional[RewardConfig] = None,
              sim: Optional[SimilarityProvider] = None,
              reference: Optional[PolicyBackend] = None) -> tuple[RolloutGroup, list[Trajectory]]:
    """``cfg.group_size`` concurrent rollouts of one query.

    If every rollout returned log-probs and ``reference`` is given, the
    group carries traces with ``logp_old = logp_theta`` (on-policy
    sampling) and ``logp_ref`` scored by ``reference``.
    """
    idx = range(cfg.group_size)
    with cf.ThreadPoolExecutor(max_workers=min(cfg.parallelism, cfg.group_size)) as pool:
        futures = [pool.submit(run_rollout, query, policy, tools, cfg, vocab, i, None, reward_cfg, sim)
                   for i in idx]
        trajs = [f.result() for f in futures]
    rewards = [t.reward.total if t.reward else 0.0 for t in trajs]

    traces = None
    if reference is not None and all("turn1" in t.logprobs and "turn2" in t.logprobs for t in trajs):
        traces = []
        for t in trajs:
            theta = t.logprobs["turn1"] + t.logprobs["turn2"]
            ref = (reference.score([_image(query.image), _text(t.turn1_prompt)], t.turn1_raw or "")
                   + reference.score([_text(t.turn2_prompt)], t.turn2_raw or ""))
            if len(ref) != len(theta):
                traces = None
                log.warning("reference scorer returned %d tokens for %d sampled; dropping traces",
                            len(ref), len(theta))
                break
            traces.append(LogprobTrace(theta, theta, ref))
    return RolloutGroup(query.image_id, rewards, tuple(traces) if traces else None), trajs

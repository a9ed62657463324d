"""Policy and tool backends: JSON-over-HTTP clients and scripted mocks.

Wire formats
------------
Policy generate::

    {"messages": [{"role": ..., "parts": [{"kind": "text"|"image", "value": ...}]}],
     "sampling": {"temperature": t, "max_tokens": n, "seed": s},
     "want_logprobs": bool,
     "metadata": {"query_id": ..., "rollout_index": i, "turn": 1|2}}
    -> {"text": ..., "logprobs": [...]?}

Policy score::

    {"prompt_parts": [...], "completion_text": ...} -> {"logprobs": [...]}

Tool::

    {"tool": name, "args": {...}, "images": [ref, ...]}
    -> {"texts": [...], "images": [ref, ...], "success": bool}

``metadata`` is an optional extension; servers may ignore it. Remote
backends send images inline as ``data:image/png;base64,...`` URIs.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Sequence

import yaml

from ..protocol import ToolKind

Message = dict[str, Any]


class TransportError(RuntimeError):
    """A backend could not be reached or answered garbage."""


class ToolTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class Generation:
    text: str
    logprobs: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class ToolResult:
    texts: tuple[str, ...] = ()
    images: tuple[str, ...] = ()
    success: bool = False
    latency: float = field(default=0.0, compare=False)
    error: Optional[str] = None


class PolicyBackend(Protocol):
    def generate(self, messages: Sequence[Message], sampling: Mapping[str, Any],
                 want_logprobs: bool = False,
                 metadata: Optional[Mapping[str, Any]] = None) -> Generation: ...

    def score(self, prompt_parts: Sequence[Mapping[str, Any]], completion_text: str) -> list[float]: ...


class ToolBackend(Protocol):
    def execute(self, tool: ToolKind, args: Mapping[str, Any], images: Sequence[str]) -> ToolResult: ...


def fingerprint(messages: Sequence[Message]) -> str:
    """Stable hash of a message list (sampling params excluded)."""
    blob = json.dumps(list(messages), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def turn_of(messages: Sequence[Message]) -> int:
    return 1 + sum(1 for m in messages if m.get("role") == "assistant")


def load_script(path: str | Path, section: str) -> dict[str, Any]:
    """Read a JSON/YAML mock script; ``section`` selects a top-level key if present."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    doc = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ValueError(f"{p}: mock script must be a mapping")
    body = doc.get(section, doc)
    if not isinstance(body, dict):
        raise ValueError(f"{p}: section {section!r} must be a mapping")
    return body


# --- images on the wire -------------------------------------------------------

def encode_image_ref(ref: str) -> str:
    if ref.startswith("data:"):
        return ref
    data = Path(ref).read_bytes()
    return "data:image/png;base64," + base64.b64encode(data).decode("ascii")


def decode_image_value(value: str) -> bytes:
    if not value.startswith("data:"):
        raise ValueError("not a data URI")
    return base64.b64decode(value.split(",", 1)[1])


def _inline_messages(messages: Sequence[Message]) -> list[Message]:
    out = []
    for m in messages:
        parts = [
            {"kind": "image", "value": encode_image_ref(p["value"])} if p["kind"] == "image" else p
            for p in m["parts"]
        ]
        out.append({"role": m["role"], "parts": parts})
    return out


# --- HTTP -------------------------------------------------------------------

class HttpPolicyBackend:
    def __init__(self, url: str, timeout: float = 600.0, client: Any = None):
        import httpx

        self.url = url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        import httpx

        try:
            resp = self._client.post(self.url + path, json=payload)
            resp.raise_for_status()
            body = resp.json()
        except (httpx.HTTPError, ValueError) as e:
            raise TransportError(f"{self.url}{path}: {e}") from e
        if not isinstance(body, dict):
            raise TransportError(f"{self.url}{path}: response is not an object")
        return body

    def generate(self, messages, sampling, want_logprobs=False, metadata=None) -> Generation:
        payload = {"messages": _inline_messages(messages), "sampling": dict(sampling),
                   "want_logprobs": want_logprobs}
        if metadata:
            payload["metadata"] = dict(metadata)
        body = self._post("/generate", payload)
        if not isinstance(body.get("text"), str):
            raise TransportError(f"{self.url}/generate: response has no 'text'")
        lp = body.get("logprobs")
        return Generation(body["text"], tuple(lp) if lp is not None else None)

    def score(self, prompt_parts, completion_text) -> list[float]:
        parts = _inline_messages([{"role": "user", "parts": list(prompt_parts)}])[0]["parts"]
        body = self._post("/score", {"prompt_parts": parts, "completion_text": completion_text})
        try:
            return [float(x) for x in body["logprobs"]]
        except (KeyError, TypeError, ValueError) as e:
            raise TransportError(f"{self.url}/score: bad logprobs: {e}") from e


class HttpToolBackend:
    def __init__(self, url: str, store: Any = None, timeout: float = 600.0, client: Any = None):
        import httpx

        self.url = url.rstrip("/")
        self.store = store
        self._client = client or httpx.Client(timeout=timeout)

    def execute(self, tool, args, images) -> ToolResult:
        import httpx

        payload = {"tool": tool.value, "args": dict(args),
                   "images": [encode_image_ref(r) for r in images]}
        t0 = time.perf_counter()
        try:
            resp = self._client.post(self.url, json=payload)
            resp.raise_for_status()
            body = resp.json()
        except httpx.TimeoutException as e:
            raise ToolTimeout(str(e)) from e
        except (httpx.HTTPError, ValueError) as e:
            raise TransportError(f"{self.url}: {e}") from e
        refs = []
        for v in body.get("images", []):
            if v.startswith("data:") and self.store is not None:
                refs.append(self.store.put_bytes(decode_image_value(v)))
            else:
                refs.append(v)
        return ToolResult(tuple(body.get("texts", [])), tuple(refs), bool(body.get("success", False)),
                          time.perf_counter() - t0)


# --- scripted mocks ---------------------------------------------------------

class ScriptedPolicy:
    """Canned responses for tests and offline replay.

    Script keys (all optional):

    ``fingerprints``
        ``{sha256(messages): text | {text, logprobs}}``, checked first.
    ``queries``
        ``{query_id: {rollouts: [...]}}``, per-image override of ``rollouts``.
    ``rollouts``
        list of ``{turn1, turn2, logprobs: {turn1, turn2}}``; rollout ``i``
        of a group uses entry ``i % len``.
    ``default``
        ``{turn1, turn2}`` fallback.
    ``fail``
        ``"transport"`` makes every call raise :class:`TransportError`.
    ``score_logprob``
        constant per-token log-prob returned by :meth:`score` (default -0.5).
    """

    def __init__(self, script: Mapping[str, Any]):
        self.script = dict(script)
        self.calls: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        return cls(load_script(path, "policy"))

    @staticmethod
    def _entry(raw: Any) -> Generation:
        if isinstance(raw, str):
            return Generation(raw)
        lp = raw.get("logprobs")
        return Generation(raw["text"], tuple(lp) if lp is not None else None)

    def generate(self, messages, sampling, want_logprobs=False, metadata=None) -> Generation:
        with self._lock:
            self.calls.append({"turn": turn_of(messages), "sampling": dict(sampling),
                               "metadata": dict(metadata or {})})
        if self.script.get("fail") == "transport":
            raise TransportError("scripted transport failure")
        fp = fingerprint(messages)
        fps = self.script.get("fingerprints") or {}
        if fp in fps:
            return self._entry(fps[fp])
        turn = f"turn{turn_of(messages)}"
        meta = metadata or {}
        per_query = (self.script.get("queries") or {}).get(str(meta.get("query_id")))
        rollouts = (per_query or {}).get("rollouts") or self.script.get("rollouts") or []
        if rollouts:
            idx = int(meta.get("rollout_index", 0)) % len(rollouts)
            entry = rollouts[idx]
        elif "default" in self.script:
            entry = self.script["default"]
        else:
            raise TransportError(f"no scripted response for {turn} (fingerprint {fp[:12]})")
        text = entry.get(turn)
        if text is None:
            raise TransportError(f"scripted rollout has no {turn} text")
        lp = (entry.get("logprobs") or {}).get(turn)
        return Generation(text, tuple(lp) if lp is not None and want_logprobs else None)

    def _scripted_length(self, completion_text: str) -> Optional[int]:
        entries = list(self.script.get("rollouts") or [])
        for q in (self.script.get("queries") or {}).values():
            entries.extend(q.get("rollouts") or [])
        for e in entries:
            for turn, lp in (e.get("logprobs") or {}).items():
                if e.get(turn) == completion_text and lp is not None:
                    return len(lp)
        return None

    def score(self, prompt_parts, completion_text) -> list[float]:
        """Constant ``score_logprob`` per token; the token count follows the
        scripted log-probs of a matching turn, else whitespace words."""
        value = float(self.script.get("score_logprob", -0.5))
        n = self._scripted_length(completion_text)
        if n is None:
            n = max(1, len(completion_text.split()))
        return [value] * n


class ScriptedTool:
    """Per-tool canned results.

    Each key is a tool name mapping to ``{texts, images, success}`` and
    optionally ``raise: timeout|transport`` or ``delay: seconds``. Image
    paths are resolved against ``base_dir``. Unlisted tools fail.
    """

    def __init__(self, script: Mapping[str, Any], base_dir: str | Path | None = None):
        self.script = {ToolKind.parse(k): v for k, v in script.items()}
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self.calls: list[tuple[ToolKind, dict[str, Any]]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedTool":
        return cls(load_script(path, "tools"), base_dir=Path(path).parent)

    def execute(self, tool, args, images) -> ToolResult:
        with self._lock:
            self.calls.append((tool, dict(args)))
        spec = self.script.get(tool)
        if spec is None:
            return ToolResult(success=False, error="tool not scripted")
        if spec.get("delay"):
            time.sleep(float(spec["delay"]))
        if spec.get("raise") == "timeout":
            raise ToolTimeout(f"scripted timeout for {tool.value}")
        if spec.get("raise") == "transport":
            raise TransportError(f"scripted transport failure for {tool.value}")
        refs = []
        for r in spec.get("images", []):
            p = Path(r)
            if self.base_dir is not None and not p.is_absolute():
                p = self.base_dir / p
            refs.append(str(p))
        return ToolResult(tuple(spec.get("texts", [])), tuple(refs), bool(spec.get("success", True)))

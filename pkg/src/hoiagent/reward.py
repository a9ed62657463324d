"""Composite trajectory reward: set matching F1 plus format and gated tool terms."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .assignment import linear_assignment
from .core import HOITriplet, iou, normalize_label
from .protocol import ToolKind, check_format, predictions_from_turn2


@dataclass(frozen=True)
class RewardConfig:
    delta: float = 0.8          # label similarity threshold (strict >)
    eta: float = 0.5            # IoU threshold for both boxes (strict >)
    epsilon: float = 1e-6       # F1 denominator stabilizer
    format_value: float = 0.5
    tool_value: float = 0.2

    def __post_init__(self) -> None:
        if not (0 < self.delta <= 1):
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not (0 < self.eta <= 1):
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.format_value < 0 or self.tool_value < 0:
            raise ValueError("format_value and tool_value must be non-negative")


class SimilarityProvider(Protocol):
    def __call__(self, a: str, b: str) -> float: ...


class ExactMatchProvider:
    """1.0 on equal normalized labels, else 0.0."""

    def __call__(self, a: str, b: str) -> float:
        return 1.0 if normalize_label(a) == normalize_label(b) else 0.0


def exact_match_provider() -> ExactMatchProvider:
    return ExactMatchProvider()


class EmbeddingError(RuntimeError):
    """The embedding service could not produce vectors."""


class EmbeddingClient(Protocol):
    def embed(self, labels: Sequence[str]) -> list[list[float]]: ...


class HttpEmbeddingClient:
    """Client for ``POST {labels: [...]}`` -> ``{vectors: [[...]]}``."""

    def __init__(self, url: str, timeout: float = 30.0, client: Any = None):
        import httpx

        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, labels: Sequence[str]) -> list[list[float]]:
        import httpx

        try:
            resp = self._client.post(self.url, json={"labels": list(labels)})
            resp.raise_for_status()
            vectors = resp.json()["vectors"]
        except (httpx.HTTPError, KeyError, ValueError) as e:
            raise EmbeddingError(f"embedding request to {self.url} failed: {e}") from e
        return vectors


class EmbeddingProvider:
    """Cosine similarity from unit vectors served by an :class:`EmbeddingClient`.

    Vectors are cached per label. Reads are lock-free; the lock only
    serializes cache fills.
    """

    def __init__(self, client: EmbeddingClient, norm_tol: float = 1e-3):
        self.client = client
        self.norm_tol = norm_tol
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._dim: int | None = None

    def prefetch(self, labels: Iterable[str]) -> None:
        missing = sorted({normalize_label(l) for l in labels} - self._cache.keys())
        if not missing:
            return
        with self._lock:
            missing = [l for l in missing if l not in self._cache]
            if not missing:
                return
            vectors = self.client.embed(missing)
            if len(vectors) != len(missing):
                raise EmbeddingError(f"asked for {len(missing)} vectors, got {len(vectors)}")
            for label, vec in zip(missing, vectors):
                arr = np.asarray(vec, dtype=float)
                if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                    raise EmbeddingError(f"bad vector for {label!r}")
                if self._dim is None:
                    self._dim = arr.shape[0]
                elif arr.shape[0] != self._dim:
                    raise EmbeddingError(f"vector for {label!r} has dim {arr.shape[0]}, expected {self._dim}")
                if abs(float(np.linalg.norm(arr)) - 1.0) > self.norm_tol:
                    raise EmbeddingError(f"vector for {label!r} is not unit-norm")
                self._cache[label] = arr

    def __call__(self, a: str, b: str) -> float:
        a, b = normalize_label(a), normalize_label(b)
        if a == b:
            return 1.0
        if a not in self._cache or b not in self._cache:
            self.prefetch([a, b])
        return float(np.clip(self._cache[a] @ self._cache[b], -1.0, 1.0))


def embedding_provider(client: EmbeddingClient) -> EmbeddingProvider:
    return EmbeddingProvider(client)


@dataclass(frozen=True)
class AffinityMatrix:
    entries: np.ndarray                 # (N_p, N_g) int8 in {0, 1}
    pred_index: tuple[int, ...]
    gt_index: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int], ...]   # matched (pred, gt) indices only
    tp: int


@dataclass(frozen=True)
class RewardBreakdown:
    r_hoi: float
    r_format: float
    r_tool: float
    total: float
    precision: float
    recall: float
    matching: Matching
    n_pred: int = 0
    n_gt: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_hoi": self.r_hoi,
            "r_format": self.r_format,
            "r_tool": self.r_tool,
            "total": self.total,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.matching.tp,
            "n_pred": self.n_pred,
            "n_gt": self.n_gt,
            "pairs": [list(p) for p in self.matching.pairs],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RewardBreakdown":
        return cls(
            r_hoi=d["r_hoi"], r_format=d["r_format"], r_tool=d["r_tool"], total=d["total"],
            precision=d["precision"], recall=d["recall"],
            matching=Matching(tuple(tuple(p) for p in d.get("pairs", [])), d["tp"]),
            n_pred=d.get("n_pred", 0), n_gt=d.get("n_gt", 0),
        )


def affinity(pred: Sequence[HOITriplet], gt: Sequence[HOITriplet],
             cfg: RewardConfig, sim: SimilarityProvider) -> AffinityMatrix:
    s = np.zeros((len(pred), len(gt)), dtype=np.int8)
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if (sim(p.verb, g.verb) > cfg.delta and sim(p.object, g.object) > cfg.delta
                    and iou(p.human_box, g.human_box) > cfg.eta
                    and iou(p.object_box, g.object_box) > cfg.eta):
                s[i, j] = 1
    return AffinityMatrix(s, tuple(range(len(pred))), tuple(range(len(gt))))


def optimal_assignment(s: AffinityMatrix | np.ndarray) -> Matching:
    entries = s.entries if isinstance(s, AffinityMatrix) else np.asarray(s)
    pairs = tuple(p for p in linear_assignment(1.0 - entries.astype(float)) if entries[p] > 0)
    return Matching(pairs, len(pairs))


def hoi_reward(pred: Sequence[HOITriplet], gt: Sequence[HOITriplet], cfg: RewardConfig,
               sim: SimilarityProvider) -> tuple[float, float, float, Matching]:
    """F1 of the optimal one-to-one matching; returns (r_hoi, P, R, matching)."""
    matching = optimal_assignment(affinity(pred, gt, cfg, sim))
    if not pred or not gt:
        return 0.0, 0.0, 0.0, matching
    p = matching.tp / len(pred)
    r = matching.tp / len(gt)
    return 2 * p * r / (p + r + cfg.epsilon), p, r, matching


@dataclass(frozen=True)
class ToolInvocation:
    tool: ToolKind
    success: bool


def tool_reward(tools_invoked: Iterable[ToolInvocation | tuple[ToolKind, bool]],
                r_hoi: float, cfg: RewardConfig) -> float:
    if r_hoi <= 0:
        return 0.0
    for inv in tools_invoked:
        ok = inv.success if isinstance(inv, ToolInvocation) else inv[1]
        if ok:
            return cfg.tool_value
    return 0.0


def total_reward(turn1_raw: str, turn2_raw: str, gt: Sequence[HOITriplet],
                 tool_log: Iterable[ToolInvocation | tuple[ToolKind, bool]],
                 cfg: RewardConfig | None = None, sim: SimilarityProvider | None = None,
                 predictions: Sequence[HOITriplet] | None = None) -> RewardBreakdown:
    """Score one trajectory from its raw turn texts.

    ``predictions`` overrides the strict parse of ``turn2_raw`` (for
    example with a best-effort salvage parse).
    """
    cfg = cfg or RewardConfig()
    sim = sim or ExactMatchProvider()
    pred = list(predictions) if predictions is not None else predictions_from_turn2(turn2_raw)
    r_hoi, p, r, matching = hoi_reward(pred, gt, cfg, sim)
    r_format = cfg.format_value if check_format(turn1_raw, turn2_raw) else 0.0
    r_tool = tool_reward(tool_log, r_hoi, cfg)
    return RewardBreakdown(r_hoi, r_format, r_tool, r_hoi + r_format + r_tool, p, r,
                           matching, len(pred), len(gt))


def zero_breakdown(n_gt: int = 0) -> RewardBreakdown:
    return RewardBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, Matching((), 0), 0, n_gt)

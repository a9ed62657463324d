"""Group-relative advantages, the k3 KL estimator and GRPO objective values.

Only values are computed here; gradients belong to an external trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

EPS_STD = 1e-8
LOG_RATIO_CLAMP = 30.0
DEFAULT_BETA = 0.04


@dataclass(frozen=True)
class LogprobTrace:
    """Per-token log-probs of one sampled sequence under three policies."""

    logp_theta: tuple[float, ...]
    logp_old: tuple[float, ...]
    logp_ref: tuple[float, ...]

    def __post_init__(self) -> None:
        for name in ("logp_theta", "logp_old", "logp_ref"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        n = len(self.logp_theta)
        if n < 1:
            raise ValueError("trace must hold at least one token")
        if len(self.logp_old) != n or len(self.logp_ref) != n:
            raise ValueError(f"misaligned trace lengths: {n}, {len(self.logp_old)}, {len(self.logp_ref)}")
        for name in ("logp_theta", "logp_old", "logp_ref"):
            if any(not math.isfinite(x) or x > 0 for x in getattr(self, name)):
                raise ValueError(f"{name} entries must be finite and <= 0")

    @property
    def tokens(self) -> int:
        return len(self.logp_theta)


@dataclass(frozen=True)
class RolloutGroup:
    query_id: str
    rewards: tuple[float, ...]
    logprob_traces: Optional[tuple[LogprobTrace, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if any(not math.isfinite(r) for r in self.rewards):
            raise ValueError(f"group {self.query_id}: non-finite reward")
        if self.logprob_traces is not None:
            object.__setattr__(self, "logprob_traces", tuple(self.logprob_traces))
            if len(self.logprob_traces) != len(self.rewards):
                raise ValueError(f"group {self.query_id}: {len(self.rewards)} rewards but "
                                 f"{len(self.logprob_traces)} traces")

    @property
    def size(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True)
class GroupAdvantages:
    advantages: tuple[float, ...]
    kl_per_rollout: tuple[float, ...] = ()
    ratios: tuple[float, ...] = ()
    objective_value: Optional[float] = None
    beta: float = DEFAULT_BETA


def advantages(rewards: Sequence[float]) -> list[float]:
    """Z-scored rewards using the population std.

    Groups whose std is at most ``EPS_STD`` get all-zero advantages. The
    guard is a threshold, not an additive term, so positive affine reward
    transforms leave the output unchanged.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"advantages need a group of at least 2 rewards, got {r.size}")
    centered = r - r.mean()
    std = float(np.sqrt(np.mean(centered * centered)))
    if std <= EPS_STD:
        return [0.0] * r.size
    return (centered / std).tolist()


def kl_value(logp_theta: float, logp_ref: float) -> float:
    """``rho - log(rho) - 1`` with ``rho = pi_ref / pi_theta``; always >= 0."""
    d = min(max(logp_ref - logp_theta, -LOG_RATIO_CLAMP), LOG_RATIO_CLAMP)
    # expm1 keeps precision near d = 0
    return max(0.0, math.expm1(d) - d)


def token_mean_kl(trace: LogprobTrace) -> float:
    return math.fsum(kl_value(t, r) for t, r in zip(trace.logp_theta, trace.logp_ref)) / trace.tokens


def grpo_objective(group: RolloutGroup, beta: float = DEFAULT_BETA,
                   clip_eps: Optional[float] = None) -> GroupAdvantages:
    """Objective value ``mean_i(ratio_i * A_i - beta * KL_i)`` for one group.

    ``ratio_i`` is the sequence-level importance ratio from summed
    log-probs; ``KL_i`` is the token-mean of :func:`kl_value`. Passing
    ``clip_eps`` switches to the PPO-style clipped surrogate.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if group.logprob_traces is None:
        raise ValueError(f"group {group.query_id} has no log-prob traces")
    adv = advantages(group.rewards)
    kls, ratios, terms = [], [], []
    for a, tr in zip(adv, group.logprob_traces):
        log_ratio = math.fsum(tr.logp_theta) - math.fsum(tr.logp_old)
        ratio = math.exp(min(max(log_ratio, -LOG_RATIO_CLAMP), LOG_RATIO_CLAMP))
        surrogate = ratio * a
        if clip_eps is not None:
            surrogate = min(surrogate, min(max(ratio, 1 - clip_eps), 1 + clip_eps) * a)
        kl = token_mean_kl(tr)
        kls.append(kl)
        ratios.append(ratio)
        terms.append(surrogate - beta * kl)
    return GroupAdvantages(
        advantages=tuple(adv),
        kl_per_rollout=tuple(kls),
        ratios=tuple(ratios),
        objective_value=math.fsum(terms) / len(terms),
        beta=beta,
    )


def sft_nll(logprobs: Sequence[float]) -> float:
    """Token-mean negative log-likelihood of the target reasoning tokens."""
    if len(logprobs) == 0:
        raise ValueError("empty trace")
    return -math.fsum(float(x) for x in logprobs) / len(logprobs)

"""Prefill eviction policies: decide which token positions stay resident.

Three strategies, each returning the keep-set plus a per-position importance
map used later when the offloaded tier is truncated:

* ``streaming_llm`` -- keep the first ``sinks`` tokens (attention sinks
  absorb a disproportionate share of attention mass) plus a trailing window
  of recent tokens.
* ``h2o`` -- heavy hitters: score every token by its accumulated attention
  mass over the causal prefill matrix, keep the top scorers plus a recent
  window of half the budget.
* ``snapkv`` -- score prefix tokens by how much attention the last
  ``window`` queries (the observation window) pay them, smooth the scores
  with 1-D average pooling so whole clusters survive, keep the top scorers
  plus the observation window itself.

Selection is per head and fully deterministic: score ties always resolve to
the lower (earlier) position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgError, BudgetTooSmall, DimError
from .numerics import Vec, _as_matrix, avg_pool_1d, causal_softmax_matrix, top_k_indices


class PolicyKind(str, Enum):
    STREAMING_LLM = "streaming_llm"
    H2O = "h2o"
    SNAPKV = "snapkv"


@dataclass(frozen=True)
class EvictionPolicy:
    """A configured eviction strategy.

    ``budget`` is the total resident-token target.  ``sinks`` applies to
    streaming_llm only; ``window``/``kernel`` apply to snapkv (h2o derives
    its local window as ``budget // 2``).
    """

    kind: PolicyKind
    budget: int
    sinks: int = 32
    window: int = 32
    kernel: int = 5

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ArgError(f"budget must be >= 1, got {self.budget}")
        if self.sinks < 0:
            raise ArgError(f"sinks must be >= 0, got {self.sinks}")
        if self.window < 1:
            raise ArgError(f"window must be >= 1, got {self.window}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ArgError(f"kernel must be an odd positive int, got {self.kernel}")


@dataclass(frozen=True)
class EvictionResult:
    """Keep-set plus importance scores over every prefill position."""

    keep: frozenset[int]
    importance: Mapping[int, float]


def _keep_all(prompt_len: int) -> EvictionResult:
    return EvictionResult(
        keep=frozenset(range(prompt_len)),
        importance={t: 1.0 for t in range(prompt_len)},
    )


def select_streaming(prompt_len: int, policy: EvictionPolicy) -> EvictionResult:
    """Attention sinks plus a sliding window of the most recent tokens."""
    if policy.kind is not PolicyKind.STREAMING_LLM:
        raise ArgError(f"policy kind is {policy.kind}, expected streaming_llm")
    if policy.budget < policy.sinks + 1:
        raise BudgetTooSmall(f"budget {policy.budget} < sinks {policy.sinks} + 1")
    if prompt_len <= policy.budget:
        return _keep_all(prompt_len)
    window = policy.budget - policy.sinks
    keep = set(range(policy.sinks)) | set(range(prompt_len - window, prompt_len))
    return EvictionResult(
        keep=frozenset(keep),
        importance={t: 1.0 if t in keep else 0.0 for t in range(prompt_len)},
    )


def select_h2o(queries: Sequence[Vec], keys: Sequence[Vec], policy: EvictionPolicy) -> EvictionResult:
    """Heavy hitters by accumulated attention score, plus a recent window.

    importance[t] is the column sum over the causal softmax matrix (every
    prefill query's attention mass on token t).  The budget splits evenly:
    ``budget // 2`` recent tokens, the remainder to top-scoring tokens.
    """
    if policy.kind is not PolicyKind.H2O:
        raise ArgError(f"policy kind is {policy.kind}, expected h2o")
    q = _as_matrix(queries, "queries")
    k = _as_matrix(keys, "keys")
    if q.shape[0] != k.shape[0]:
        raise DimError(f"{q.shape[0]} queries vs {k.shape[0]} keys")
    prompt_len = q.shape[0]
    scores = causal_softmax_matrix(q, k).sum(axis=0)
    importance = {t: float(scores[t]) for t in range(prompt_len)}
    if prompt_len <= policy.budget:
        return EvictionResult(keep=frozenset(range(prompt_len)), importance=importance)
    local = policy.budget // 2
    heavy = policy.budget - local
    boundary = prompt_len - local
    keep = set(range(boundary, prompt_len))
    keep |= top_k_indices(scores[:boundary], heavy)
    return EvictionResult(keep=frozenset(keep), importance=importance)


def select_snapkv(queries: Sequence[Vec], keys: Sequence[Vec], policy: EvictionPolicy) -> EvictionResult:
    """Observation-window scoring with average pooling, plus the window itself.

    The last ``window`` queries vote on prefix tokens through their causal
    softmax rows; votes are pooled with shrinking-edge average pooling before
    the top ``budget - window`` prefix tokens are kept.  Window tokens are
    unconditionally resident and carry infinite importance.
    """
    if policy.kind is not PolicyKind.SNAPKV:
        raise ArgError(f"policy kind is {policy.kind}, expected snapkv")
    if policy.budget < policy.window:
        raise BudgetTooSmall(f"budget {policy.budget} < window {policy.window}")
    q = _as_matrix(queries, "queries")
    k = _as_matrix(keys, "keys")
    if q.shape[0] != k.shape[0]:
        raise DimError(f"{q.shape[0]} queries vs {k.shape[0]} keys")
    prompt_len = q.shape[0]
    if prompt_len <= policy.budget:
        return _keep_all(prompt_len)

    # prompt_len > budget >= window, so the prefix is non-empty.
    boundary = prompt_len - policy.window
    obs = q[boundary:]
    logits = obs @ k.T / math.sqrt(q.shape[1])
    for j in range(policy.window):
        logits[j, boundary + j + 1 :] = -np.inf
    peak = logits.max(axis=1, keepdims=True)
    weights = np.exp(logits - peak)
    rows = weights / weights.sum(axis=1, keepdims=True)
    raw = rows[:, :boundary].sum(axis=0)
    pooled = avg_pool_1d(raw, policy.kernel)

    keep = set(range(boundary, prompt_len))
    keep |= top_k_indices(pooled, policy.budget - policy.window)
    importance: dict[int, float] = {t: float(pooled[t]) for t in range(boundary)}
    importance.update({t: math.inf for t in range(boundary, prompt_len)})
    return EvictionResult(keep=frozenset(keep), importance=importance)


def select(queries: Sequence[Vec], keys: Sequence[Vec], policy: EvictionPolicy) -> EvictionResult:
    """Dispatch to the policy's selector; streaming_llm needs only the length."""
    if policy.kind is PolicyKind.STREAMING_LLM:
        return select_streaming(len(queries), policy)
    if policy.kind is PolicyKind.H2O:
        return select_h2o(queries, keys, policy)
    if policy.kind is PolicyKind.SNAPKV:
        return select_snapkv(queries, keys, policy)
    raise ArgError(f"unknown policy kind {policy.kind!r}")

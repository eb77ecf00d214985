"""The calibrated-eviction state machine.

Prefill computes exact causal attention over the full prompt, evicts per the
configured policy, and precomputes a *calibration state* over the offloaded
tokens using the last prompt query: that query, the log exponent-sum of its
scores against the offloaded keys, and the attention output it produces
there.

Each decode step attends over the resident cache, then gates on the cosine
similarity ``rho`` between the current query and the stored historical one:

* ``rho < theta1``  -- the stored state is too stale to trust: reload the
  offloaded entries, rebuild the state with the current query, and merge it
  in.  The step's output is exact (up to dropped tokens).
* ``rho > theta2``  -- the queries are similar enough: merge the stale state
  in as-is.  Cheap, approximate, usually an improvement over ignoring the
  evicted mass.
* otherwise        -- pass through the resident-only output untouched.

State is per head and strictly serial across that head's decode steps;
distinct heads never share state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import kvstore
from .errors import ArgError, InvalidThresholds, NullState
from .eviction import EvictionPolicy, select
from .kvstore import KvEntry, KvPartition
from .numerics import (
    PartialAttention,
    Vec,
    _as_matrix,
    attend,
    causal_softmax_matrix,
    cosine,
    merge,
)


@dataclass(frozen=True)
class Thresholds:
    """Cosine gates: below ``theta1`` recompute, above ``theta2`` calibrate.

    Both must be finite and within [-1, 1].  Ordering is not enforced here:
    with ``theta1 >= theta2`` the pass-through band is simply empty and the
    recompute branch wins the overlap, which threshold sweeps exploit.
    """

    theta1: float
    theta2: float

    def __post_init__(self) -> None:
        for name in ("theta1", "theta2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or not -1.0 <= v <= 1.0:
                raise InvalidThresholds(f"{name} must lie in [-1, 1], got {v!r}")


@dataclass(frozen=True)
class CalibrationState:
    """Precomputed attention over the offloaded tokens.

    ``c_q`` is the historical query the state was built with, ``c_lse`` the
    log exponent-sum of its scores against the offloaded keys, ``c_out`` the
    attention output over them.  ``evicted_count == 0`` marks the null
    sentinel (nothing was ever offloaded).  ``age`` counts decode steps since
    the last rebuild and is diagnostic only.
    """

    c_q: np.ndarray
    c_lse: float
    c_out: np.ndarray
    age: int
    evicted_count: int

    @classmethod
    def null(cls) -> "CalibrationState":
        return cls(
            c_q=np.zeros(0, dtype=np.float64),
            c_lse=-math.inf,
            c_out=np.zeros(0, dtype=np.float64),
            age=0,
            evicted_count=0,
        )

    @property
    def is_null(self) -> bool:
        return self.evicted_count == 0


class ActionTag(str, Enum):
    RECOMPUTE = "recompute"
    CALIBRATE = "calibrate"
    PASS_THROUGH = "pass_through"
    NO_STATE = "no_state"


@dataclass(frozen=True)
class DecodeAction:
    """What a decode step did, and the similarity that decided it."""

    tag: ActionTag
    rho: float


@dataclass(frozen=True)
class PrefillResult:
    outputs: np.ndarray  # [prompt_len, d_v] exact causal attention
    partition: KvPartition
    state: CalibrationState


@dataclass(frozen=True)
class DecodeOutcome:
    """Output plus action, successor state, and merge diagnostics.

    ``resident`` is the partial over the resident tier alone (the
    eviction-only answer); ``alpha_evicted`` is the weight the offloaded mass
    received in the merged output (0 when nothing was merged).
    """

    output: np.ndarray
    action: DecodeAction
    new_state: CalibrationState
    resident: PartialAttention
    alpha_evicted: float


def state_as_partial(state: CalibrationState) -> PartialAttention:
    """View a calibration state as the partial attention it stores."""
    if state.is_null:
        raise NullState("null calibration state carries no attention mass")
    return PartialAttention(out=state.c_out, lse=state.c_lse, count=state.evicted_count)


def _build_state(q: np.ndarray, partition: KvPartition) -> CalibrationState:
    if not partition.offloaded:
        return CalibrationState.null()
    part = attend(q, partition.offloaded_keys(), partition.offloaded_values())
    return CalibrationState(
        c_q=np.array(q, dtype=np.float64),
        c_lse=part.lse,
        c_out=part.out,
        age=0,
        evicted_count=part.count,
    )


def prefill(
    queries: Sequence[Vec],
    keys: Sequence[Vec],
    values: Sequence[Vec],
    policy: EvictionPolicy,
    calibration_size: int | float = math.inf,
) -> PrefillResult:
    """Process the whole prompt: exact outputs, eviction, calibration state.

    Outputs use the full uncompressed cache (eviction only affects what
    later decode steps see).  The calibration state is built from the last
    prompt query against the offloaded tier that remains after truncation to
    ``calibration_size``; if nothing is offloaded the state is null.
    """
    q = _as_matrix(queries, "queries")
    k = _as_matrix(keys, "keys", width=q.shape[1] if q.size else None)
    v = _as_matrix(values, "values")
    if q.shape[0] == 0:
        raise ArgError("prefill needs at least one token")
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ArgError(f"inconsistent prefill lengths: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")

    outputs = causal_softmax_matrix(q, k) @ v

    result = select(q, k, policy)
    entries = [KvEntry(position=t, key=k[t], value=v[t]) for t in range(q.shape[0])]
    partition = kvstore.split(entries, set(result.keep), importance=result.importance)
    partition = kvstore.truncate_offload(partition, calibration_size)
    return PrefillResult(
        outputs=outputs,
        partition=partition,
        state=_build_state(q[-1], partition),
    )


def decode_step(
    q_t: Vec,
    partition: KvPartition,
    state: CalibrationState,
    thresholds: Thresholds,
) -> DecodeOutcome:
    """One gated decode step; the partition itself is not modified.

    The caller owns cache maintenance: the current token's KV entry is
    appended to the resident tier (kvstore.append_resident) before the step,
    so attention covers the token itself like any causal self-attention.
    """
    resident_part = attend(q_t, partition.resident_keys(), partition.resident_values())

    if state.is_null:
        return DecodeOutcome(
            output=resident_part.out,
            action=DecodeAction(tag=ActionTag.NO_STATE, rho=math.nan),
            new_state=state,
            resident=resident_part,
            alpha_evicted=0.0,
        )

    rho = cosine(q_t, state.c_q)
    if rho < thresholds.theta1:
        new_state = _build_state(np.asarray(q_t, dtype=np.float64), partition)
        merged = merge(resident_part, state_as_partial(new_state))
        return DecodeOutcome(
            output=merged.out,
            action=DecodeAction(tag=ActionTag.RECOMPUTE, rho=rho),
            new_state=new_state,
            resident=resident_part,
            alpha_evicted=math.exp(new_state.c_lse - merged.lse),
        )
    if rho > thresholds.theta2:
        merged = merge(resident_part, state_as_partial(state))
        return DecodeOutcome(
            output=merged.out,
            action=DecodeAction(tag=ActionTag.CALIBRATE, rho=rho),
            new_state=replace(state, age=state.age + 1),
            resident=resident_part,
            alpha_evicted=math.exp(state.c_lse - merged.lse),
        )
    return DecodeOutcome(
        output=resident_part.out,
        action=DecodeAction(tag=ActionTag.PASS_THROUGH, rho=rho),
        new_state=replace(state, age=state.age + 1),
        resident=resident_part,
        alpha_evicted=0.0,
    )

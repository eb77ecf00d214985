"""KV-cache token eviction with speculative calibration.

Exact decomposed attention over resident/offloaded token subsets, three
eviction policies, the cosine-gated recompute/calibrate state machine, and
an experiment harness that scores everything against a double-precision
full-cache oracle.
"""

from .engine import (
    ActionTag,
    CalibrationState,
    DecodeAction,
    DecodeOutcome,
    PrefillResult,
    Thresholds,
    decode_step,
    prefill,
    state_as_partial,
)
from .eviction import EvictionPolicy, EvictionResult, PolicyKind, select
from .harness import Comparison, RunConfig, RunResult, StepRecord, calibration_size_sweep, heatmap, run, sweep
from .kvstore import KvEntry, KvPartition, ModelDims, append_resident, split, truncate_offload
from .numerics import PartialAttention, attend, avg_pool_1d, cosine, merge, top_k_indices
from .workload import DriftWorkload, Trace, generate, load_trace, oracle_full, oracle_prefill, save_trace

__all__ = [
    "ActionTag",
    "CalibrationState",
    "Comparison",
    "DecodeAction",
    "DecodeOutcome",
    "DriftWorkload",
    "EvictionPolicy",
    "EvictionResult",
    "KvEntry",
    "KvPartition",
    "ModelDims",
    "PartialAttention",
    "PolicyKind",
    "PrefillResult",
    "RunConfig",
    "RunResult",
    "StepRecord",
    "Thresholds",
    "Trace",
    "append_resident",
    "attend",
    "avg_pool_1d",
    "calibration_size_sweep",
    "cosine",
    "decode_step",
    "generate",
    "heatmap",
    "load_trace",
    "merge",
    "oracle_full",
    "oracle_prefill",
    "prefill",
    "run",
    "save_trace",
    "select",
    "split",
    "state_as_partial",
    "sweep",
    "top_k_indices",
    "truncate_offload",
]

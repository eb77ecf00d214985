"""Tiered per-(layer, head) KV storage.

Three tiers: ``resident`` entries stay in the compressed cache, ``offloaded``
entries were evicted but remain reachable for calibration and recomputation,
and dropped entries are gone for good (only their count survives).
Partitions are immutable; every operation returns a new one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ArgError, MissingImportance, PositionOrder, UnknownPosition


@dataclass(frozen=True)
class KvEntry:
    """One token's cached key/value at a 0-based sequence position."""

    position: int
    key: np.ndarray
    value: np.ndarray


@dataclass(frozen=True)
class ModelDims:
    """Layer/head counts and per-head key/value widths."""

    n_layers: int
    n_heads: int
    d_k: int
    d_v: int

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "d_k", "d_v"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ArgError(f"{name} must be a positive int, got {v!r}")


@dataclass(frozen=True)
class KvPartition:
    """Resident / offloaded / dropped split of one head's KV entries.

    ``importance`` carries the eviction strategy's per-position scores; it is
    consulted when the offloaded tier is truncated to a calibration size.
    """

    resident: tuple[KvEntry, ...] = ()
    offloaded: tuple[KvEntry, ...] = ()
    dropped_count: int = 0
    importance: Mapping[int, float] = field(default_factory=dict)

    @property
    def total_entries(self) -> int:
        return len(self.resident) + len(self.offloaded) + self.dropped_count

    def resident_keys(self) -> list[np.ndarray]:
        return [e.key for e in self.resident]

    def resident_values(self) -> list[np.ndarray]:
        return [e.value for e in self.resident]

    def offloaded_keys(self) -> list[np.ndarray]:
        return [e.key for e in self.offloaded]

    def offloaded_values(self) -> list[np.ndarray]:
        return [e.value for e in self.offloaded]


def split(
    entries: Iterable[KvEntry],
    keep: set[int],
    importance: Mapping[int, float] | None = None,
) -> KvPartition:
    """Partition entries into resident (positions in ``keep``) and offloaded.

    Both tiers preserve the original entry order; nothing is dropped yet.
    """
    items = list(entries)
    positions = [e.position for e in items]
    if len(set(positions)) != len(positions):
        raise ArgError("duplicate positions in entries")
    unknown = set(keep) - set(positions)
    if unknown:
        raise UnknownPosition(f"keep references missing positions {sorted(unknown)}")
    return KvPartition(
        resident=tuple(e for e in items if e.position in keep),
        offloaded=tuple(e for e in items if e.position not in keep),
        dropped_count=0,
        importance=dict(importance) if importance is not None else {},
    )


def truncate_offload(p: KvPartition, calibration_size: int | float) -> KvPartition:
    """Cap the offloaded tier at the ``calibration_size`` highest-importance
    positions (ties favor the lower position); the remainder is dropped.

    ``math.inf`` keeps everything; 0 drops the whole tier, degrading the
    scheme to plain eviction.
    """
    if calibration_size == math.inf:
        return p
    if not isinstance(calibration_size, (int, np.integer)) or calibration_size < 0:
        raise ArgError(f"calibration_size must be a nonnegative int or inf, got {calibration_size!r}")
    if len(p.offloaded) <= calibration_size:
        return p
    missing = [e.position for e in p.offloaded if e.position not in p.importance]
    if missing:
        raise MissingImportance(f"offloaded positions without importance: {missing}")
    ranked = sorted(p.offloaded, key=lambda e: (-p.importance[e.position], e.position))
    kept_positions = {e.position for e in ranked[:calibration_size]}
    return KvPartition(
        resident=p.resident,
        offloaded=tuple(e for e in p.offloaded if e.position in kept_positions),
        dropped_count=p.dropped_count + (len(p.offloaded) - len(kept_positions)),
        importance=p.importance,
    )


def append_resident(p: KvPartition, e: KvEntry) -> KvPartition:
    """Append a decode-phase entry to the resident tier.

    The position must exceed everything stored; decode tokens are never
    evicted, so they only ever extend the resident tier.
    """
    stored = [x.position for x in p.resident] + [x.position for x in p.offloaded]
    if stored and e.position <= max(stored):
        raise PositionOrder(f"position {e.position} not greater than stored max {max(stored)}")
    return KvPartition(
        resident=p.resident + (e,),
        offloaded=p.offloaded,
        dropped_count=p.dropped_count,
        importance=p.importance,
    )

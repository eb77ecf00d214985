"""Experiment driver: gated-calibration decode vs eviction-only vs oracle.

``run`` replays every (layer, head) stream of a workload through three
pipelines sharing one keep-set: the calibrated engine, plain eviction
(resident-only attention), and optionally a full-cache engine.  Every decode
step is scored by L1 distance to the double-precision oracle and logged as a
:class:`StepRecord`; aggregates land in ``steps.csv``, ``frequency.csv`` and
``summary.csv``.

Heads are independent, so they can be evaluated by a process pool; records
are sorted before writing, making the CSVs byte-identical across runs and
worker counts.  (Wall-time columns in the calibration-size sweep are the one
exception to byte determinism.)
"""

from __future__ import annotations

import csv
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from time import perf_counter
from typing import Iterable, Sequence

import numpy as np

from . import engine, kvstore
from .errors import ArgError, InvalidThresholds, RangeError
from .engine import ActionTag, CalibrationState, Thresholds
from .eviction import EvictionPolicy
from .kvstore import KvEntry
from .numerics import attend, cosine
from .workload import DriftWorkload, Trace, generate, load_trace


class Comparison(str, Enum):
    EVICTION_ONLY = "eviction_only"
    CALIDROP = "calidrop"
    FULL_KV = "fullkv"


DEFAULT_COMPARISONS = frozenset({Comparison.EVICTION_ONLY, Comparison.CALIDROP})

STEP_COLUMNS = (
    "layer",
    "head",
    "step",
    "rho",
    "action",
    "l1_evict_only",
    "l1_calidrop",
    "alpha_j",
    "l1_fullkv",
)


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs; ``workload`` is a drift spec or a
    trace directory path."""

    workload: DriftWorkload | str | Path
    policy: EvictionPolicy
    thresholds: Thresholds
    calibration_size: int | float = math.inf
    comparisons: frozenset[Comparison] = DEFAULT_COMPARISONS
    output_dir: str | Path = "runs"
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.comparisons:
            raise ArgError("at least one comparison must be selected")
        if self.workers < 1:
            raise ArgError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class StepRecord:
    """Per-decode-step metrics for one head."""

    layer: int
    head: int
    step: int
    rho: float
    action: str
    l1_evict_only: float
    l1_calidrop: float
    alpha_j: float
    l1_fullkv: float | None = None


@dataclass
class RunResult:
    records: list[StepRecord]
    decode_len: int
    n_heads: int
    step_seconds: list[float] = field(default_factory=list)

    def mean_l1(self, comparison: Comparison, action: str | None = None) -> float:
        """Mean L1 distance to the oracle, optionally restricted to an action."""
        key = {
            Comparison.EVICTION_ONLY: "l1_evict_only",
            Comparison.CALIDROP: "l1_calidrop",
            Comparison.FULL_KV: "l1_fullkv",
        }[comparison]
        vals = [
            getattr(r, key)
            for r in self.records
            if (action is None or r.action == action) and getattr(r, key) is not None
        ]
        return float(np.mean(vals)) if vals else math.nan

    def action_count(self, tag: ActionTag) -> int:
        return sum(1 for r in self.records if r.action == tag.value)

    def action_fraction(self, tag: ActionTag) -> float:
        return self.action_count(tag) / len(self.records) if self.records else math.nan

    def layer_frequency(self) -> dict[int, float]:
        """Per-layer recompute frequency: recomputes / decode steps, head-averaged."""
        freq: dict[int, float] = {}
        for layer in sorted({r.layer for r in self.records}):
            rows = [r for r in self.records if r.layer == layer]
            recomputes = sum(1 for r in rows if r.action == ActionTag.RECOMPUTE.value)
            freq[layer] = recomputes / len(rows)
        return freq

    @property
    def median_step_seconds(self) -> float:
        return statistics.median(self.step_seconds) if self.step_seconds else math.nan


def resolve_trace(config: RunConfig) -> Trace:
    if isinstance(config.workload, DriftWorkload):
        return generate(config.workload)
    return load_trace(config.workload)


@dataclass(frozen=True)
class _HeadTask:
    layer: int
    head: int
    prompt_len: int
    q_prefill: np.ndarray
    k_prefill: np.ndarray
    v_prefill: np.ndarray
    q_decode: np.ndarray
    k_decode: np.ndarray
    v_decode: np.ndarray
    policy: EvictionPolicy
    thresholds: Thresholds
    calibration_size: int | float
    with_fullkv: bool


def _run_head(task: _HeadTask) -> tuple[list[StepRecord], list[float]]:
    qp = task.q_prefill.astype(np.float64)
    kp = task.k_prefill.astype(np.float64)
    vp = task.v_prefill.astype(np.float64)
    qd = task.q_decode.astype(np.float64)
    kd = task.k_decode.astype(np.float64)
    vd = task.v_decode.astype(np.float64)
    prompt_len = task.prompt_len

    pre = engine.prefill(qp, kp, vp, task.policy, task.calibration_size)
    partition, state = pre.partition, pre.state

    full_partition = None
    null_state = CalibrationState.null()
    if task.with_fullkv:
        entries = [KvEntry(position=t, key=kp[t], value=vp[t]) for t in range(prompt_len)]
        full_partition = kvstore.split(entries, set(range(prompt_len)))

    k_full = np.concatenate([kp, kd])
    v_full = np.concatenate([vp, vd])

    records: list[StepRecord] = []
    times: list[float] = []
    for t in range(qd.shape[0]):
        q_t = qd[t]
        entry = KvEntry(position=prompt_len + t, key=kd[t], value=vd[t])
        partition = kvstore.append_resident(partition, entry)
        oracle = attend(q_t, k_full[: prompt_len + t + 1], v_full[: prompt_len + t + 1]).out

        t0 = perf_counter()
        outcome = engine.decode_step(q_t, partition, state, task.thresholds)
        times.append(perf_counter() - t0)
        state = outcome.new_state

        l1_fullkv = None
        if task.with_fullkv:
            full_partition = kvstore.append_resident(full_partition, entry)
            full_out = engine.decode_step(q_t, full_partition, null_state, task.thresholds).output
            l1_fullkv = float(np.abs(full_out - oracle).sum())

        records.append(
            StepRecord(
                layer=task.layer,
                head=task.head,
                step=t,
                rho=float(outcome.action.rho),
                action=outcome.action.tag.value,
                l1_evict_only=float(np.abs(outcome.resident.out - oracle).sum()),
                l1_calidrop=float(np.abs(outcome.output - oracle).sum()),
                alpha_j=float(outcome.alpha_evicted),
                l1_fullkv=l1_fullkv,
            )
        )
    return records, times


def _execute(config: RunConfig, trace: Trace | None = None) -> RunResult:
    """Run every head of the workload without touching the filesystem."""
    if trace is None:
        trace = resolve_trace(config)
    tasks = [
        _HeadTask(
            layer=layer,
            head=head,
            prompt_len=trace.prompt_len,
            q_prefill=trace.q_prefill[layer, head],
            k_prefill=trace.k_prefill[layer, head],
            v_prefill=trace.v_prefill[layer, head],
            q_decode=trace.q_decode[layer, head],
            k_decode=trace.k_decode[layer, head],
            v_decode=trace.v_decode[layer, head],
            policy=config.policy,
            thresholds=config.thresholds,
            calibration_size=config.calibration_size,
            with_fullkv=Comparison.FULL_KV in config.comparisons,
        )
        for layer in range(trace.dims.n_layers)
        for head in range(trace.dims.n_heads)
    ]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_run_head, tasks))
    else:
        outcomes = [_run_head(t) for t in tasks]

    records: list[StepRecord] = []
    step_seconds: list[float] = []
    for head_records, times in outcomes:
        records.extend(head_records)
        step_seconds.extend(times)
    records.sort(key=lambda r: (r.layer, r.head, r.step))
    return RunResult(
        records=records,
        decode_len=trace.decode_len,
        n_heads=trace.dims.n_heads,
        step_seconds=step_seconds,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_steps_csv(records: Sequence[StepRecord], path: Path) -> None:
    _write_csv(
        path,
        STEP_COLUMNS,
        (
            (r.layer, r.head, r.step, r.rho, r.action, r.l1_evict_only, r.l1_calidrop, r.alpha_j, r.l1_fullkv)
            for r in records
        ),
    )


def _summary_rows(result: RunResult, comparisons: frozenset[Comparison]) -> list[tuple]:
    rows: list[tuple] = []
    tags = sorted({r.action for r in result.records})
    for comparison in sorted(comparisons, key=lambda c: c.value):
        rows.append((comparison.value, "all", result.mean_l1(comparison), len(result.records)))
        for tag in tags:
            n = sum(1 for r in result.records if r.action == tag)
            rows.append((comparison.value, tag, result.mean_l1(comparison, tag), n))
    return rows


def run(config: RunConfig) -> RunResult:
    """Execute the configured experiment and write the three CSV reports."""
    result = _execute(config)
    out = Path(config.output_dir)
    write_steps_csv(result.records, out / "steps.csv")
    _write_csv(
        out / "frequency.csv",
        ("layer", "recompute_frequency"),
        sorted(result.layer_frequency().items()),
    )
    _write_csv(
        out / "summary.csv",
        ("comparison", "action", "mean_l1", "count"),
        _summary_rows(result, config.comparisons),
    )
    return result


def sweep(
    config: RunConfig,
    theta1_grid: Sequence[float],
    theta2_grid: Sequence[float],
) -> list[dict]:
    """One run per (theta1, theta2) pair over a fixed workload.

    Every pair must satisfy theta1 < theta2; the whole grid is validated
    before any computation happens.
    """
    if not theta1_grid or not theta2_grid:
        raise ArgError("threshold grids must be non-empty")
    for t1 in theta1_grid:
        for t2 in theta2_grid:
            if not t1 < t2:
                raise InvalidThresholds(f"grid pair theta1={t1} >= theta2={t2}")
    trace = resolve_trace(config)
    rows: list[dict] = []
    for t1 in theta1_grid:
        for t2 in theta2_grid:
            result = _execute(replace(config, thresholds=Thresholds(t1, t2)), trace)
            rows.append(
                {
                    "theta1": float(t1),
                    "theta2": float(t2),
                    "mean_l1": result.mean_l1(Comparison.CALIDROP),
                    "recompute_frequency": result.action_fraction(ActionTag.RECOMPUTE),
                    "calibrate_fraction": result.action_fraction(ActionTag.CALIBRATE),
                }
            )
    _write_csv(
        Path(config.output_dir) / "sweep.csv",
        ("theta1", "theta2", "mean_l1", "recompute_frequency", "calibrate_fraction"),
        ([r[k] for k in ("theta1", "theta2", "mean_l1", "recompute_frequency", "calibrate_fraction")] for r in rows),
    )
    return rows


def heatmap(
    source: DriftWorkload | Trace | str | Path,
    layer: int,
    head: int,
    span: tuple[int, int] | None = None,
    out_path: str | Path | None = None,
) -> np.ndarray:
    """Pairwise query cosine-similarity matrix over a position span.

    Positions index the concatenated prefill+decode query sequence; ``span``
    is half-open and defaults to the whole sequence.  The matrix is exactly
    symmetric with a unit diagonal.
    """
    if isinstance(source, Trace):
        trace = source
    elif isinstance(source, DriftWorkload):
        trace = generate(source)
    else:
        trace = load_trace(source)
    if not 0 <= layer < trace.dims.n_layers or not 0 <= head < trace.dims.n_heads:
        raise RangeError(f"layer {layer} / head {head} outside trace dims")
    total = trace.prompt_len + trace.decode_len
    start, stop = span if span is not None else (0, total)
    if not 0 <= start < stop <= total:
        raise RangeError(f"span [{start}, {stop}) outside [0, {total})")

    queries = np.concatenate(
        [trace.q_prefill[layer, head], trace.q_decode[layer, head]]
    ).astype(np.float64)[start:stop]
    n = stop - start
    matrix = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            sim = cosine(queries[i], queries[j])
            matrix[i, j] = sim
            matrix[j, i] = sim
    if out_path is not None:
        positions = list(range(start, stop))
        _write_csv(
            Path(out_path),
            ["pos"] + [str(p) for p in positions],
            ([positions[i]] + [float(x) for x in matrix[i]] for i in range(n)),
        )
    return matrix


def calibration_size_sweep(config: RunConfig, sizes: Sequence[int | float]) -> list[dict]:
    """One run per calibration size; records accuracy and per-step wall time.

    Size 0 degrades to plain eviction; ``math.inf`` keeps the whole evicted
    tier.  Wall time is the median over decode steps on a monotonic clock.
    """
    for size in sizes:
        if size != math.inf and (not isinstance(size, (int, np.integer)) or size < 0):
            raise ArgError(f"sizes must be nonnegative ints or inf, got {size!r}")
    trace = resolve_trace(config)
    rows: list[dict] = []
    for size in sizes:
        result = _execute(replace(config, calibration_size=size), trace)
        rows.append(
            {
                "calibration_size": size,
                "mean_l1": result.mean_l1(Comparison.CALIDROP),
                "mean_l1_evict_only": result.mean_l1(Comparison.EVICTION_ONLY),
                "median_step_seconds": result.median_step_seconds,
            }
        )
    _write_csv(
        Path(config.output_dir) / "calibration_sizes.csv",
        ("calibration_size", "mean_l1", "mean_l1_evict_only", "median_step_seconds"),
        (
            [
                "inf" if r["calibration_size"] == math.inf else int(r["calibration_size"]),
                r["mean_l1"],
                r["mean_l1_evict_only"],
                r["median_step_seconds"],
            ]
            for r in rows
        ),
    )
    return rows

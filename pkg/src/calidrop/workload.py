"""Workload sources: synthetic drift traces, trace files, and the oracle.

A trace is the complete per-(layer, head) record of prefill and decode
Q/K/V tensors, stored as float32.  The synthetic generator draws keys and
values i.i.d. normal and walks the query through

    q_{t+1} = normalize(q_t + drift * eta_t),   eta_t ~ N(0, I)

across the whole sequence, so consecutive queries stay similar for small
drift -- the regime the calibration gate is built for.  ``oracle_full`` is
the ground truth every error metric compares against: double-precision
attention over the complete, uncompressed cache.

Traces round-trip losslessly through the ``KVT1`` on-disk format: a
directory with a ``manifest.json`` and one little-endian float32 blob per
(layer, head, tensor, phase), row-major [time, dim].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgError, DimMismatch, FormatError, RangeError, TruncatedFile
from .kvstore import ModelDims
from .numerics import attend

TRACE_VERSION = 1
TRACE_DTYPE = "f32"


@dataclass(frozen=True)
class DriftWorkload:
    """Deterministic synthetic workload; identical seeds give identical traces."""

    seed: int
    dims: ModelDims
    prompt_len: int
    decode_len: int
    drift: float
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ArgError(f"seed must be >= 0, got {self.seed}")
        if self.prompt_len < 1 or self.decode_len < 1:
            raise ArgError("prompt_len and decode_len must be >= 1")
        if not math.isfinite(self.drift) or self.drift < 0:
            raise ArgError(f"drift must be a finite nonnegative real, got {self.drift}")
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise ArgError(f"scale must be a finite positive real, got {self.scale}")


@dataclass(frozen=True)
class Trace:
    """Per-(layer, head) Q/K/V tensors for prefill and decode, float32.

    Array shapes: ``q_prefill [L, H, prompt_len, d_k]`` and so on; values use
    ``d_v`` in the last axis.
    """

    dims: ModelDims
    prompt_len: int
    decode_len: int
    q_prefill: np.ndarray
    k_prefill: np.ndarray
    v_prefill: np.ndarray
    q_decode: np.ndarray
    k_decode: np.ndarray
    v_decode: np.ndarray

    def __post_init__(self) -> None:
        d = self.dims
        expected = {
            "q_prefill": (d.n_layers, d.n_heads, self.prompt_len, d.d_k),
            "k_prefill": (d.n_layers, d.n_heads, self.prompt_len, d.d_k),
            "v_prefill": (d.n_layers, d.n_heads, self.prompt_len, d.d_v),
            "q_decode": (d.n_layers, d.n_heads, self.decode_len, d.d_k),
            "k_decode": (d.n_layers, d.n_heads, self.decode_len, d.d_k),
            "v_decode": (d.n_layers, d.n_heads, self.decode_len, d.d_v),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimMismatch(f"{name} has shape {arr.shape}, expected {shape}")


def generate(w: DriftWorkload) -> Trace:
    """Materialize a drift workload; independent RNG stream per (layer, head)."""
    d = w.dims
    shape_q = (d.n_layers, d.n_heads, w.prompt_len, d.d_k)
    q_prefill = np.empty(shape_q, dtype=np.float32)
    k_prefill = np.empty(shape_q, dtype=np.float32)
    v_prefill = np.empty((d.n_layers, d.n_heads, w.prompt_len, d.d_v), dtype=np.float32)
    q_decode = np.empty((d.n_layers, d.n_heads, w.decode_len, d.d_k), dtype=np.float32)
    k_decode = np.empty((d.n_layers, d.n_heads, w.decode_len, d.d_k), dtype=np.float32)
    v_decode = np.empty((d.n_layers, d.n_heads, w.decode_len, d.d_v), dtype=np.float32)

    total = w.prompt_len + w.decode_len
    for layer in range(d.n_layers):
        for head in range(d.n_heads):
            rng = np.random.default_rng(np.random.SeedSequence([w.seed, layer, head]))
            k_all = rng.standard_normal((total, d.d_k)) * w.scale
            v_all = rng.standard_normal((total, d.d_v)) * w.scale
            q0 = rng.standard_normal(d.d_k)
            q0 /= np.linalg.norm(q0)
            if w.drift == 0.0:
                chain = np.broadcast_to(q0, (total, d.d_k)).copy()
            else:
                steps = rng.standard_normal((total - 1, d.d_k))
                chain = np.empty((total, d.d_k))
                chain[0] = q0
                for t in range(1, total):
                    nxt = chain[t - 1] + w.drift * steps[t - 1]
                    chain[t] = nxt / np.linalg.norm(nxt)
            q_prefill[layer, head] = chain[: w.prompt_len].astype(np.float32)
            q_decode[layer, head] = chain[w.prompt_len :].astype(np.float32)
            k_prefill[layer, head] = k_all[: w.prompt_len].astype(np.float32)
            k_decode[layer, head] = k_all[w.prompt_len :].astype(np.float32)
            v_prefill[layer, head] = v_all[: w.prompt_len].astype(np.float32)
            v_decode[layer, head] = v_all[w.prompt_len :].astype(np.float32)

    return Trace(
        dims=d,
        prompt_len=w.prompt_len,
        decode_len=w.decode_len,
        q_prefill=q_prefill,
        k_prefill=k_prefill,
        v_prefill=v_prefill,
        q_decode=q_decode,
        k_decode=k_decode,
        v_decode=v_decode,
    )


def oracle_full(trace: Trace, layer: int, head: int, step: int) -> np.ndarray:
    """Ground-truth attention at decode ``step`` over the complete cache.

    Covers every prefill token plus decode tokens up to and including the
    step itself, evaluated in double precision.
    """
    if not 0 <= layer < trace.dims.n_layers or not 0 <= head < trace.dims.n_heads:
        raise RangeError(f"layer {layer} / head {head} outside trace dims")
    if not 0 <= step < trace.decode_len:
        raise RangeError(f"step {step} outside decode range [0, {trace.decode_len})")
    q = trace.q_decode[layer, head, step].astype(np.float64)
    keys = np.concatenate(
        [trace.k_prefill[layer, head], trace.k_decode[layer, head, : step + 1]]
    ).astype(np.float64)
    values = np.concatenate(
        [trace.v_prefill[layer, head], trace.v_decode[layer, head, : step + 1]]
    ).astype(np.float64)
    return attend(q, keys, values).out


def oracle_prefill(trace: Trace, layer: int, head: int) -> np.ndarray:
    """Ground-truth causal attention outputs at every prompt position."""
    if not 0 <= layer < trace.dims.n_layers or not 0 <= head < trace.dims.n_heads:
        raise RangeError(f"layer {layer} / head {head} outside trace dims")
    q = trace.q_prefill[layer, head].astype(np.float64)
    k = trace.k_prefill[layer, head].astype(np.float64)
    v = trace.v_prefill[layer, head].astype(np.float64)
    return np.stack([attend(q[i], k[: i + 1], v[: i + 1]).out for i in range(q.shape[0])])


def _blob_name(layer: int, head: int, tensor: str, phase: str) -> str:
    return f"L{layer}_H{head}_{tensor}_{phase}.bin"


def save_trace(trace: Trace, path: str | Path) -> None:
    """Write a trace as a KVT1 directory (manifest + per-tensor f32 blobs)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    d = trace.dims
    manifest = {
        "version": TRACE_VERSION,
        "n_layers": d.n_layers,
        "n_heads": d.n_heads,
        "d_k": d.d_k,
        "d_v": d.d_v,
        "prompt_len": trace.prompt_len,
        "decode_len": trace.decode_len,
        "dtype": TRACE_DTYPE,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    arrays = {
        ("q", "prefill"): trace.q_prefill,
        ("k", "prefill"): trace.k_prefill,
        ("v", "prefill"): trace.v_prefill,
        ("q", "decode"): trace.q_decode,
        ("k", "decode"): trace.k_decode,
        ("v", "decode"): trace.v_decode,
    }
    for layer in range(d.n_layers):
        for head in range(d.n_heads):
            for (tensor, phase), arr in arrays.items():
                blob = arr[layer, head].astype("<f4").tobytes()
                (root / _blob_name(layer, head, tensor, phase)).write_bytes(blob)


def load_trace(path: str | Path) -> Trace:
    """Read a KVT1 directory back into a trace, validating sizes exactly."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    required = {"version", "n_layers", "n_heads", "d_k", "d_v", "prompt_len", "decode_len", "dtype"}
    missing = required - set(manifest)
    if missing:
        raise FormatError(f"manifest missing keys {sorted(missing)}")
    if manifest["version"] != TRACE_VERSION:
        raise FormatError(f"unsupported trace version {manifest['version']!r}")
    if manifest["dtype"] != TRACE_DTYPE:
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}")
    try:
        dims = ModelDims(
            n_layers=manifest["n_layers"],
            n_heads=manifest["n_heads"],
            d_k=manifest["d_k"],
            d_v=manifest["d_v"],
        )
        prompt_len = int(manifest["prompt_len"])
        decode_len = int(manifest["decode_len"])
    except (ArgError, TypeError, ValueError) as exc:
        raise FormatError(f"bad manifest dims: {exc}") from None
    if prompt_len < 1 or decode_len < 1:
        raise FormatError("prompt_len and decode_len must be >= 1")

    def read_blob(layer: int, head: int, tensor: str, phase: str) -> np.ndarray:
        steps = prompt_len if phase == "prefill" else decode_len
        dim = dims.d_v if tensor == "v" else dims.d_k
        blob_path = root / _blob_name(layer, head, tensor, phase)
        if not blob_path.is_file():
            raise TruncatedFile(f"missing blob {blob_path.name}")
        raw = blob_path.read_bytes()
        expected = steps * dim * 4
        if len(raw) != expected:
            raise DimMismatch(f"{blob_path.name}: {len(raw)} bytes, expected {expected}")
        return np.frombuffer(raw, dtype="<f4").reshape(steps, dim)

    def stack(tensor: str, phase: str) -> np.ndarray:
        return np.stack(
            [
                np.stack([read_blob(layer, head, tensor, phase) for head in range(dims.n_heads)])
                for layer in range(dims.n_layers)
            ]
        )

    return Trace(
        dims=dims,
        prompt_len=prompt_len,
        decode_len=decode_len,
        q_prefill=stack("q", "prefill"),
        k_prefill=stack("k", "prefill"),
        v_prefill=stack("v", "prefill"),
        q_decode=stack("q", "decode"),
        k_decode=stack("k", "decode"),
        v_decode=stack("v", "decode"),
    )

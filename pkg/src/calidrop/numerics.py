"""Numerically stable attention primitives.

The central object is :class:`PartialAttention`: the attention output over a
*subset* of tokens together with ``lse``, the log of that subset's softmax
denominator (log-sum-exp of the scaled scores).  Two partials over disjoint
subsets combine exactly into the partial over their union::

    merge(attend(q, S_i), attend(q, S_j)) == attend(q, S_i | S_j)

because the softmax denominator is additive over subsets and the outputs mix
with weights proportional to each subset's exponent mass.  This identity is
what lets a compressed cache and an offloaded remainder be attended
separately and recombined without error.

Denominators are kept in log space, so score magnitudes up to hundreds do
not overflow, and all arithmetic runs in float64 regardless of input dtype.
All functions here are pure; they never mutate their arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgError, DimError, EmptyInput, NumError

# A "vector" anywhere in this package is a 1-D float array (or anything
# np.asarray can turn into one).
Vec = np.ndarray


def _as_vector(x, name: str) -> np.ndarray:
    try:
        v = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DimError(f"{name} is not a numeric vector: {exc}") from None
    if v.ndim != 1:
        raise DimError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumError(f"{name} contains non-finite values")
    return v


def _as_matrix(rows, name: str, width: int | None = None) -> np.ndarray:
    try:
        m = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DimError(f"{name} is not a rectangular numeric array: {exc}") from None
    if m.size == 0:
        return m.reshape(0, width if width is not None else 0)
    if m.ndim != 2:
        raise DimError(f"{name} must be a sequence of equal-length vectors, got shape {m.shape}")
    if width is not None and m.shape[1] != width:
        raise DimError(f"{name} has width {m.shape[1]}, expected {width}")
    if not np.all(np.isfinite(m)):
        raise NumError(f"{name} contains non-finite values")
    return m


@dataclass(frozen=True)
class PartialAttention:
    """Attention over a token subset: output, log exponent-sum, subset size.

    ``lse = log sum_t exp(q.k_t / sqrt(d_k))`` over the subset.  The empty
    subset is the sentinel ``count == 0`` with ``lse == -inf`` and a zero
    output; it is the identity element of :func:`merge`.
    """

    out: np.ndarray
    lse: float
    count: int

    @classmethod
    def empty(cls, d_v: int = 0) -> "PartialAttention":
        return cls(out=np.zeros(d_v, dtype=np.float64), lse=-math.inf, count=0)

    @property
    def is_empty(self) -> bool:
        return self.count == 0


def attend(q: Vec, keys: Sequence[Vec], values: Sequence[Vec]) -> PartialAttention:
    """Scaled dot-product attention of one query over a token subset.

    Scores are ``q . k_t / sqrt(d_k)``; the softmax is evaluated with the
    usual max-shift so arbitrary score magnitudes cannot overflow.  Empty
    ``keys``/``values`` return the empty sentinel.

    Raises DimError on inconsistent dimensions, NumError on non-finite input.
    """
    qv = _as_vector(q, "q")
    if qv.shape[0] == 0:
        raise DimError("q must have at least one element")
    k = _as_matrix(keys, "keys", width=qv.shape[0])
    v = _as_matrix(values, "values")
    if k.shape[0] != v.shape[0]:
        raise DimError(f"{k.shape[0]} keys vs {v.shape[0]} values")
    if k.shape[0] == 0:
        return PartialAttention.empty(v.shape[1])

    scores = k @ qv / math.sqrt(qv.shape[0])
    peak = float(scores.max())
    weights = np.exp(scores - peak)
    mass = float(weights.sum())
    out = (weights / mass) @ v
    return PartialAttention(out=out, lse=peak + math.log(mass), count=k.shape[0])


def merge(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    """Combine partials over disjoint subsets into the partial over the union.

    The merged output is the convex combination ``alpha_a*a.out +
    alpha_b*b.out`` with ``alpha = exp(lse - merged_lse)``, i.e. each side
    weighted by its share of the joint exponent mass.  Merging with the empty
    sentinel returns the other operand unchanged.
    """
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    if a.out.shape != b.out.shape:
        raise DimError(f"output dims differ: {a.out.shape} vs {b.out.shape}")
    lse = float(np.logaddexp(a.lse, b.lse))
    alpha_a = math.exp(a.lse - lse)
    alpha_b = math.exp(b.lse - lse)
    return PartialAttention(
        out=alpha_a * a.out + alpha_b * b.out,
        lse=lse,
        count=a.count + b.count,
    )


def cosine(a: Vec, b: Vec) -> float:
    """Cosine similarity in [-1, 1].

    If either vector has zero norm the result is -1.0 (the most-dissimilar
    value, so degenerate queries land on the recompute path).  Bitwise-equal
    nonzero inputs return exactly 1.0.
    """
    av = _as_vector(a, "a")
    bv = _as_vector(b, "b")
    if av.shape != bv.shape:
        raise DimError(f"dims differ: {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        return -1.0
    if np.array_equal(av, bv):
        return 1.0
    return float(np.clip(av @ bv / (na * nb), -1.0, 1.0))


def avg_pool_1d(scores: Iterable[float], kernel: int) -> np.ndarray:
    """Same-length 1-D average pooling with shrinking edge windows.

    Position ``i`` averages ``scores[max(0, i-k//2) : i+k//2+1]`` clipped to
    the array, dividing by the actual window length (no zero padding).  Each
    mean is computed centered on the position's own value, so constant
    stretches pool to exactly their value and ties stay ties.
    """
    if not isinstance(kernel, (int, np.integer)) or kernel < 1 or kernel % 2 == 0:
        raise ArgError(f"kernel must be an odd positive int, got {kernel!r}")
    s = _as_vector(list(scores), "scores")
    n = s.shape[0]
    if n == 0:
        raise EmptyInput("scores is empty")
    half = kernel // 2
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n - 1, i + half)
        out[i] = s[i] + (s[lo : hi + 1] - s[i]).sum() / (hi - lo + 1)
    return out


def top_k_indices(scores: Sequence[float], k: int) -> set[int]:
    """Indices of the k largest scores; ties go to the lower index."""
    s = _as_vector(list(scores), "scores")
    n = s.shape[0]
    if not isinstance(k, (int, np.integer)) or k < 0 or k > n:
        raise ArgError(f"k must satisfy 0 <= k <= {n}, got {k!r}")
    if k == 0:
        return set()
    # lexsort: last key is primary -> descending score, ascending index.
    order = np.lexsort((np.arange(n), -s))
    return {int(i) for i in order[:k]}


def causal_softmax_matrix(queries: Sequence[Vec], keys: Sequence[Vec]) -> np.ndarray:
    """Row-stochastic causal attention matrix.

    Row ``i`` is ``softmax(q_i . k_t / sqrt(d_k))`` over ``t <= i`` and zero
    above the diagonal.  Shared machinery for prefill outputs and for
    eviction policies that score tokens from attention rows.
    """
    q = _as_matrix(queries, "queries")
    if q.shape[0] == 0:
        raise EmptyInput("queries is empty")
    k = _as_matrix(keys, "keys", width=q.shape[1])
    if k.shape[0] != q.shape[0]:
        raise DimError(f"{q.shape[0]} queries vs {k.shape[0]} keys")
    n = q.shape[0]
    scores = q @ k.T / math.sqrt(q.shape[1])
    scores[np.triu_indices(n, 1)] = -np.inf
    peak = scores.max(axis=1, keepdims=True)
    weights = np.exp(scores - peak)
    return weights / weights.sum(axis=1, keepdims=True)

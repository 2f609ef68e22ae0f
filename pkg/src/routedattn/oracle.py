"""Slow-but-obvious reference implementations.

Everything here favours transparency over speed and runs in float64: dense
full attention, the mixed-logit map implied by a routing decision, exact
per-entry compensation errors, and small exact knapsack solvers used to
score the greedy router. The fast paths in `estimator` and `attention` are
tested against these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .clustering import ClusterModel
from .estimator import BlockErrorTable
from .router import BlockMask, expand_mask_entries, mask_from_selected

EXHAUSTIVE_MAX_BLOCKS = 24
DP_MAX_CAPACITY = 1_000_000
_TIE_REL_TOL = 1e-12


class CapabilityError(RuntimeError):
    """The requested exact computation exceeds the oracle's size limits."""


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic attention probabilities with stabilization bookkeeping.

    normalizers are the softmax denominators taken after subtracting
    row_max, so the true denominator of row i is normalizers[i] *
    exp(row_max[i]).
    """

    probs: np.ndarray  # (N_q, N_k)
    normalizers: np.ndarray  # (N_q,)
    row_max: np.ndarray  # (N_q,)


def _stabilized_map(logits: np.ndarray) -> AttentionMap:
    m = logits.max(axis=1)
    weights = np.exp(logits - m[:, None])
    z = weights.sum(axis=1)
    return AttentionMap(probs=weights / z[:, None], normalizers=z, row_max=m)


def full_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Dense attention. Returns (AttentionMap, output)."""
    d = q.shape[1]
    amap = _stabilized_map((q @ k.T) / math.sqrt(d))
    return amap, amap.probs @ v


def sparse_map_direct(
    q: np.ndarray,
    k: np.ndarray,
    q_model: ClusterModel,
    k_model: ClusterModel,
    mask: BlockMask,
) -> AttentionMap:
    """The map a routing decision implies, built from dense logits.

    Selected entries keep their exact logit q_i.k_j/sqrt(d); entries of
    compensated blocks use the centroid logit q_i.kbar_j/sqrt(d) instead,
    and one shared softmax normalizes each row over all N_k columns.
    `q` and `k` must be in cluster-contiguous order for their models.
    """
    d = q.shape[1]
    kbar_rows = np.repeat(k_model.centroids, k_model.sizes, axis=0)
    exact = (q @ k.T) / math.sqrt(d)
    comp = (q @ kbar_rows.T) / math.sqrt(d)
    entry = expand_mask_entries(mask, q_model.sizes, k_model.sizes)
    return _stabilized_map(np.where(entry, exact, comp))


def exact_entry_errors(
    q: np.ndarray,
    k: np.ndarray,
    k_model: ClusterModel,
    *,
    stabilizers: Optional[np.ndarray] = None,
):
    """Per-entry squared weight error of compensating each key.

    Entry (i, j) is (exp(q_i.kbar_j/sqrt(d) - c_i) - exp(q_i.k_j/sqrt(d) - c_i))^2
    with c_i defaulting to row i's max exact logit. Returns (errors, c).
    Rescaling by exp(2*(c - c')) converts between stabilizer choices.
    """
    d = q.shape[1]
    kbar_rows = np.repeat(k_model.centroids, k_model.sizes, axis=0)
    exact = (q @ k.T) / math.sqrt(d)
    comp = (q @ kbar_rows.T) / math.sqrt(d)
    if stabilizers is None:
        c = exact.max(axis=1)
    else:
        c = np.asarray(stabilizers, dtype=np.float64)
        if c.shape != (q.shape[0],):
            raise ValueError(f"stabilizers must have shape ({q.shape[0]},), got {c.shape}")
    diff = np.exp(comp - c[:, None]) - np.exp(exact - c[:, None])
    return diff * diff, c


def aggregate_block_sums(
    entries: np.ndarray, q_model: ClusterModel, k_model: ClusterModel
) -> np.ndarray:
    """Fold per-entry values (cluster-contiguous order) into block sums."""
    rows = np.add.reduceat(entries, q_model.offsets, axis=0)
    return np.add.reduceat(rows, k_model.offsets, axis=1)


def map_mse(a, b) -> float:
    """Mean squared difference between two attention maps."""
    pa = a.probs if isinstance(a, AttentionMap) else np.asarray(a)
    pb = b.probs if isinstance(b, AttentionMap) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValueError(f"map shapes differ: {pa.shape} vs {pb.shape}")
    diff = pa - pb
    return float(np.mean(diff * diff))


def _suffix_best(values: np.ndarray, weights: np.ndarray, start: int, cap: int) -> float:
    """Best total value from items start.. under capacity cap (forward DP)."""
    dp = np.zeros(cap + 1)
    for i in range(start, values.shape[0]):
        w = int(weights[i])
        if w <= cap:
            dp[w:] = np.maximum(dp[w:], dp[: cap + 1 - w] + values[i])
    return float(dp[cap])


def _dp_select(values: np.ndarray, weights: np.ndarray, capacity: int) -> list:
    opt = _suffix_best(values, weights, 0, capacity)
    tol = _TIE_REL_TOL * max(1.0, abs(opt))
    chosen = []
    rem = capacity
    req = opt
    for i in range(values.shape[0]):
        if req <= tol:
            # The empty continuation already reaches the optimum and is
            # lexicographically before anything that adds an index.
            break
        w = int(weights[i])
        if w <= rem and values[i] + _suffix_best(values, weights, i + 1, rem - w) >= req - tol:
            chosen.append(i)
            rem -= w
            req -= float(values[i])
    return chosen


def _exhaustive_select(values: np.ndarray, weights: np.ndarray, capacity: int) -> list:
    n = values.shape[0]
    total = 1 << n
    shifts = np.arange(n)
    chunk = 1 << 16
    best_val = 0.0
    for lo in range(0, total, chunk):
        m = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        bits = ((m[:, None] >> shifts) & 1).astype(np.float64)
        feas = bits @ weights <= capacity
        if feas.any():
            best_val = max(best_val, float((bits @ values)[feas].max()))
    tol = _TIE_REL_TOL * max(1.0, abs(best_val))
    if best_val <= tol:
        return []
    best_tuple = None
    for lo in range(0, total, chunk):
        m = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        bits = ((m[:, None] >> shifts) & 1).astype(np.float64)
        cand = m[(bits @ weights <= capacity) & (bits @ values >= best_val - tol)]
        for cm in cand:
            t = tuple(i for i in range(n) if (int(cm) >> i) & 1)
            if best_tuple is None or t < best_tuple:
                best_tuple = t
    return list(best_tuple)


def knapsack_select(values, weights, capacity: int, mode: str = "auto") -> np.ndarray:
    """Exact 0-1 knapsack: boolean selection maximizing total value.

    Value ties (within 1e-12 relative) resolve to the lexicographically
    smallest selected index set, so results are deterministic and the dp and
    exhaustive modes agree. Values must be non-negative, weights positive
    integers.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights).reshape(-1)
    if np.any(values < 0):
        raise ValueError("knapsack values must be non-negative")
    if weights.shape != values.shape or np.any(weights < 1):
        raise ValueError("knapsack weights must be positive integers, one per value")
    if capacity < 0:
        raise ValueError(f"capacity must be >= 0, got {capacity}")
    n = values.shape[0]
    if mode == "auto":
        mode = "exhaustive" if n <= 16 else "dp"
    if mode == "exhaustive":
        if n > EXHAUSTIVE_MAX_BLOCKS:
            raise CapabilityError(
                f"exhaustive knapsack handles at most {EXHAUSTIVE_MAX_BLOCKS} blocks "
                f"(got {n}); use the greedy router for larger instances"
            )
        chosen = _exhaustive_select(values, np.asarray(weights, dtype=np.float64), capacity)
    elif mode == "dp":
        if capacity > DP_MAX_CAPACITY:
            raise CapabilityError(
                f"dp knapsack handles capacities up to {DP_MAX_CAPACITY} entries "
                f"(got {capacity}); use the greedy router for larger instances"
            )
        chosen = _dp_select(values, weights.astype(np.int64), capacity)
    else:
        raise ValueError(f"unknown knapsack mode {mode!r}")
    out = np.zeros(n, dtype=bool)
    out[chosen] = True
    return out


def knapsack_oracle(table: BlockErrorTable, capacity_entries: int, mode: str = "auto") -> BlockMask:
    """Optimal block selection under an entry budget.

    Blocks flatten in row-major (query cluster, key cluster) order, so the
    lexicographic tie rule prefers low query-cluster then low key-cluster
    indices.
    """
    sizes = table.block_sizes
    chosen = knapsack_select(
        table.error_sum.reshape(-1), sizes.reshape(-1), capacity_entries, mode=mode
    )
    return mask_from_selected(chosen.reshape(sizes.shape), sizes)

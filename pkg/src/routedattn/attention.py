"""The block-sparse attention executor.

Two phases per query cluster. The exact phase runs streaming softmax
attention over the keys of the selected blocks only, producing a normalized
partial output and its log-sum-exp. The compensation phase then folds in
every unselected key cluster as a single summarized key: logit
q_i.kbar_j/sqrt(d) + ln|cluster_j| with contribution vbar_j, merged through
the running-max rescale. The ln-size term makes one merged cluster weigh
exactly as much as its members would if they all sat at the centroid, which
is what the mixed-logit reference map prescribes.

Queries whose row selects no blocks leave the exact phase as the sentinel
(lse = -inf, output = 0); merging then starts cleanly from the first
compensated cluster because exp(-inf - s) = 0 wipes the seed.

FLOP counters are deterministic integers (multiply-add = 2):
  exact_block   = 4 * d * (entries covered by selected blocks)
  compensation  = 4 * d * sum_c |q_c| * (#compensated clusters of row c)
Per-merge scalar bookkeeping (max, exp, log) is excluded by convention.
Reference paths take float64; `dtype=np.float32` runs the executor in single
precision for tolerance-gap testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clustering import ClusterModel, segment_means
from .oracle import sparse_map_direct
from .router import BlockMask, expand_mask_entries


@dataclass
class FlopCounters:
    exact_block: int = 0
    compensation: int = 0
    estimation: int = 0
    clustering: int = 0

    @property
    def total(self) -> int:
        return self.exact_block + self.compensation + self.estimation + self.clustering


@dataclass
class AttentionResult:
    output: np.ndarray  # (N_q, d_v)
    lse: np.ndarray  # (N_q,) final log-sum-exp per query
    flops: FlopCounters = field(default_factory=FlopCounters)
    density_used: float = 1.0


def exact_block_pass(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    q_model: ClusterModel,
    k_model: ClusterModel,
    mask: BlockMask,
    dtype=np.float64,
):
    """Attention restricted to selected blocks.

    Returns (normalized partial output, lse, flops). Rows with no selected
    blocks carry the sentinel lse = -inf and a zero output row. Inputs must
    be cluster-contiguous for their models.
    """
    q = q.astype(dtype, copy=False)
    k = k.astype(dtype, copy=False)
    v = v.astype(dtype, copy=False)
    d = q.shape[1]
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((q.shape[0], v.shape[1]), dtype=dtype)
    lse = np.full(q.shape[0], -np.inf, dtype=dtype)
    flops = 0
    for qc in range(q_model.num_clusters):
        r0 = int(q_model.offsets[qc])
        rows = slice(r0, r0 + int(q_model.sizes[qc]))
        sel = np.flatnonzero(mask.selected[qc])
        if sel.size == 0:
            continue
        cols = np.concatenate(
            [
                np.arange(int(k_model.offsets[j]), int(k_model.offsets[j]) + int(k_model.sizes[j]))
                for j in sel
            ]
        )
        logits = (q[rows] @ k[cols].T) * scale
        m = logits.max(axis=1)
        w = np.exp(logits - m[:, None])
        z = w.sum(axis=1)
        out[rows] = (w @ v[cols]) / z[:, None]
        lse[rows] = m + np.log(z)
        flops += 2 * d * int(q_model.sizes[qc]) * cols.size + 2 * v.shape[1] * int(
            q_model.sizes[qc]
        ) * cols.size
    return out, lse, flops


def compensation_pass(
    q: np.ndarray,
    k_model: ClusterModel,
    v_centroids: np.ndarray,
    q_model: ClusterModel,
    mask: BlockMask,
    partial_out: np.ndarray,
    partial_lse: np.ndarray,
    *,
    dtype=np.float64,
    counters: Optional[FlopCounters] = None,
    cluster_order: Optional[np.ndarray] = None,
) -> AttentionResult:
    """Merge every unselected key cluster into the partial state.

    `cluster_order` optionally fixes the merge order (a permutation of key
    cluster indices); the result is order-invariant up to rounding. Rows
    whose blocks are all selected are returned bitwise unchanged.
    """
    if mask.selected.shape[1] == 0:
        raise ValueError("no key clusters: softmax over an empty set is undefined")
    q = q.astype(dtype, copy=False)
    kbar = k_model.centroids.astype(dtype, copy=False)
    vbar = v_centroids.astype(dtype, copy=False)
    d = q.shape[1]
    scale = 1.0 / math.sqrt(d)
    ln_w = np.log(k_model.sizes.astype(np.float64)).astype(dtype)
    out = np.array(partial_out, copy=True)
    lse = np.array(partial_lse, copy=True)
    counters = counters if counters is not None else FlopCounters()
    order = np.arange(k_model.num_clusters) if cluster_order is None else np.asarray(cluster_order)

    for qc in range(q_model.num_clusters):
        comp = [j for j in order if not mask.selected[qc, j]]
        if not comp:
            continue
        r0 = int(q_model.offsets[qc])
        rows = slice(r0, r0 + int(q_model.sizes[qc]))
        m = lse[rows].copy()
        l = np.ones(int(q_model.sizes[qc]), dtype=dtype)
        acc = out[rows].copy()
        for j in comp:
            s = (q[rows] @ kbar[j]) * scale + ln_w[j]
            m_new = np.maximum(m, s)
            alpha = np.exp(m - m_new)
            p = np.exp(s - m_new)
            l = l * alpha + p
            acc = acc * alpha[:, None] + p[:, None] * vbar[j]
            m = m_new
        out[rows] = acc / l[:, None]
        lse[rows] = m + np.log(l)
        counters.compensation += 4 * d * int(q_model.sizes[qc]) * len(comp)

    return AttentionResult(output=out, lse=lse, flops=counters, density_used=mask.density)


def sparse_attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    q_model: ClusterModel,
    k_model: ClusterModel,
    mask: BlockMask,
    *,
    dtype=np.float64,
    cluster_order: Optional[np.ndarray] = None,
) -> AttentionResult:
    """Full executor: exact phase over selected blocks, then compensation.

    Inputs must be cluster-contiguous for their models. The output matches
    the mixed-logit reference (`reference_sparse_output`) up to rounding.
    """
    partial_out, partial_lse, exact_flops = exact_block_pass(
        q, k, v, q_model, k_model, mask, dtype=dtype
    )
    counters = FlopCounters(exact_block=exact_flops)
    v_centroids = segment_means(v, k_model)
    return compensation_pass(
        q,
        k_model,
        v_centroids,
        q_model,
        mask,
        partial_out,
        partial_lse,
        dtype=dtype,
        counters=counters,
        cluster_order=cluster_order,
    )


def reference_sparse_output(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    q_model: ClusterModel,
    k_model: ClusterModel,
    mask: BlockMask,
) -> np.ndarray:
    """Slow reference: materialize the mixed-logit map, then combine
    selected entries with true values and compensated entries with their
    cluster value centroids."""
    amap = sparse_map_direct(q, k, q_model, k_model, mask)
    entry = expand_mask_entries(mask, q_model.sizes, k_model.sizes)
    vbar_rows = np.repeat(segment_means(v, k_model), k_model.sizes, axis=0)
    return (amap.probs * entry) @ v + (amap.probs * ~entry) @ vbar_rows


def exact_block_flops(d: int, density_entries: int) -> int:
    """Closed form the exact-phase counter must equal (d_v = d)."""
    return 4 * d * density_entries


def compensation_flops(d: int, q_sizes: np.ndarray, compensated_per_row: np.ndarray) -> int:
    """Closed form the compensation counter must equal."""
    return int(4 * d * (np.asarray(q_sizes) * np.asarray(compensated_per_row)).sum())

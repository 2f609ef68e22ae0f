"""Block approximation-error estimation for routing.

For every (query cluster, key cluster) block this module estimates how much
softmax-map error would be introduced by replacing the block's exact logits
with centroid logits. The query side is always collapsed to its centroid, so
the cost is O(C_q * N_k * d) instead of O(N_q * N_k * d).

Two error flavours:
  - plain: squared difference of stabilized exponential weights,
        (exp(qbar.kbar/sqrt(d) - c) - exp(qbar.k_j/sqrt(d) - c))^2
  - valueAware: squared l2 norm of the value-weighted residual,
        ||exp(qbar.kbar/sqrt(d) - c) vbar - exp(qbar.k_j/sqrt(d) - c) v_j||^2

Stored block sums are *stabilized*: each query-cluster row is computed at a
recorded constant c (default: that row's max centroid logit) and the constants
ride along in the table. Raw sums are recoverable via `raw_error_sum`;
within-row routing ratios are invariant to the choice of c.

`estimate_errors_streaming` computes the value-aware sums in fixed-size key
tiles with a running local max, never materializing a (C_q, N_k) buffer, and
rescales each finished block back to the row reference. The accumulator
starts at zero: the centroid term enters only through the per-key residual,
so a single all-covering tile reproduces the naive route up to rounding.

FLOP accounting (multiply-add = 2) is the per-key work only:
estimation_flops = C_q * N_k * (2d + 4) for plain, C_q * N_k * (6d + 4) for
value-aware and streaming alike. The O(C_q * C_k * d) centroid-table setup is
excluded so the counter is exactly linear in N_k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .clustering import ClusterModel, segment_means


def plain_key_flops(d: int) -> int:
    return 2 * d + 4


def value_aware_key_flops(d: int) -> int:
    return 6 * d + 4


@dataclass(frozen=True)
class BlockErrorTable:
    """Per-block stabilized error sums plus the sizes routing needs."""

    error_sum: np.ndarray  # (C_q, C_k) stabilized sums, all >= 0
    q_sizes: np.ndarray  # (C_q,) int
    k_sizes: np.ndarray  # (C_k,) int
    stabilizers: np.ndarray  # (C_q,) per-row constants the sums were taken at
    mode: str  # "plain" | "valueAware"
    flops: int

    @property
    def block_sizes(self) -> np.ndarray:
        """Entry count of each block: |q_c| * |k_c|."""
        return np.outer(self.q_sizes, self.k_sizes)

    @property
    def total_entries(self) -> int:
        return int(self.q_sizes.sum()) * int(self.k_sizes.sum())

    @property
    def raw_error_sum(self) -> np.ndarray:
        """Sums rescaled back to unstabilized exponentials."""
        return self.error_sum * np.exp(2.0 * self.stabilizers)[:, None]


class RankedBlock(NamedTuple):
    q_cluster: int
    k_cluster: int
    ratio: float  # error_sum / block_size
    size: int


def to_ratios(table: BlockErrorTable) -> list[RankedBlock]:
    """Blocks ranked by error-per-entry, descending.

    Ties break by higher error sum, then lower query-cluster index, then
    lower key-cluster index, so the ranking is a total order.
    """
    sizes = table.block_sizes
    ranked = [
        RankedBlock(qc, kc, float(table.error_sum[qc, kc] / sizes[qc, kc]), int(sizes[qc, kc]))
        for qc in range(table.q_sizes.shape[0])
        for kc in range(table.k_sizes.shape[0])
    ]
    ranked.sort(key=lambda b: (-b.ratio, -float(table.error_sum[b.q_cluster, b.k_cluster]), b.q_cluster, b.k_cluster))
    return ranked


def _centroid_logits(q_model: ClusterModel, k_model: ClusterModel) -> np.ndarray:
    d = q_model.centroids.shape[1]
    return (q_model.centroids @ k_model.centroids.T) / math.sqrt(d)


def _resolve_stabilizers(centroid_logits: np.ndarray, stabilizers) -> np.ndarray:
    if stabilizers is None:
        return centroid_logits.max(axis=1)
    stabilizers = np.asarray(stabilizers, dtype=np.float64)
    if stabilizers.shape != (centroid_logits.shape[0],):
        raise ValueError(
            f"stabilizers must have shape ({centroid_logits.shape[0]},), got {stabilizers.shape}"
        )
    return stabilizers


def _block_sums(per_key: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum a (C_q, N_k) array into (C_q, C_k) key-cluster segments."""
    return np.add.reduceat(per_key, offsets, axis=1)


def estimate_errors(
    q_model: ClusterModel,
    k_model: ClusterModel,
    k: np.ndarray,
    *,
    stabilizers: Optional[np.ndarray] = None,
) -> BlockErrorTable:
    """Plain-mode block error table.

    `k` must be in cluster-contiguous order for `k_model`.
    """
    d = k.shape[1]
    sbar = _centroid_logits(q_model, k_model)
    c = _resolve_stabilizers(sbar, stabilizers)
    logits = (q_model.centroids @ k.T) / math.sqrt(d)
    e_bar = np.exp(sbar - c[:, None])
    e_key = np.exp(logits - c[:, None])
    diffs = np.repeat(e_bar, k_model.sizes, axis=1) - e_key
    per_block = _block_sums(diffs * diffs, k_model.offsets)
    error_sum = q_model.sizes[:, None] * per_block
    flops = q_model.num_clusters * k.shape[0] * plain_key_flops(d)
    return BlockErrorTable(
        error_sum=error_sum,
        q_sizes=q_model.sizes.copy(),
        k_sizes=k_model.sizes.copy(),
        stabilizers=c,
        mode="plain",
        flops=flops,
    )


def estimate_errors_value_aware(
    q_model: ClusterModel,
    k_model: ClusterModel,
    k: np.ndarray,
    v: np.ndarray,
    *,
    stabilizers: Optional[np.ndarray] = None,
) -> BlockErrorTable:
    """Value-aware block error table, computed the direct way.

    Materializes the full (C_q, N_k, d) residual, which is fine at reference
    scale; the streaming variant below is the kernel-shaped route. `k` and
    `v` must be in cluster-contiguous order for `k_model`.
    """
    d = k.shape[1]
    sbar = _centroid_logits(q_model, k_model)
    c = _resolve_stabilizers(sbar, stabilizers)
    vbar = segment_means(v, k_model)
    logits = (q_model.centroids @ k.T) / math.sqrt(d)
    e_bar = np.repeat(np.exp(sbar - c[:, None]), k_model.sizes, axis=1)  # (C_q, N_k)
    e_key = np.exp(logits - c[:, None])
    vbar_rows = np.repeat(vbar, k_model.sizes, axis=0)  # (N_k, d)
    resid = e_bar[:, :, None] * vbar_rows[None, :, :] - e_key[:, :, None] * v[None, :, :]
    per_key = (resid * resid).sum(axis=2)
    error_sum = q_model.sizes[:, None] * _block_sums(per_key, k_model.offsets)
    flops = q_model.num_clusters * k.shape[0] * value_aware_key_flops(d)
    return BlockErrorTable(
        error_sum=error_sum,
        q_sizes=q_model.sizes.copy(),
        k_sizes=k_model.sizes.copy(),
        stabilizers=c,
        mode="valueAware",
        flops=flops,
    )


def estimate_errors_streaming(
    q_model: ClusterModel,
    k_model: ClusterModel,
    k: np.ndarray,
    v: np.ndarray,
    *,
    tile_size: int = 64,
    dtype=np.float64,
) -> BlockErrorTable:
    """Value-aware block errors in key tiles with running-max stabilization.

    Peak extra memory is O(C_q * tile_size * d). Each (row, key-cluster)
    accumulator carries a local max m_loc that only ever rises; whenever a
    tile raises it, the partial sum is rescaled by alpha^2 and the centroid
    weight by alpha before new residuals are added. Finished blocks are
    rescaled from m_loc back to the row reference (the row's max centroid
    logit), so stored sums agree with the naive route's stabilization.
    Results are identical for any tile size up to rounding.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    d = k.shape[1]
    scale = 1.0 / math.sqrt(d)
    qbar = q_model.centroids.astype(dtype)
    kbar = k_model.centroids.astype(dtype)
    vbar = segment_means(v, k_model).astype(dtype)
    k = k.astype(dtype, copy=False)
    v = v.astype(dtype, copy=False)

    sbar = (qbar @ kbar.T) * dtype(scale)
    m_ref = sbar.max(axis=1)
    n_q = q_model.num_clusters
    error_sum = np.empty((n_q, k_model.num_clusters), dtype=dtype)
    for j in range(k_model.num_clusters):
        start = int(k_model.offsets[j])
        end = start + int(k_model.sizes[j])
        m_loc = m_ref.copy()
        w_bar = np.exp(sbar[:, j] - m_loc)  # centroid weight at the local max
        acc = np.zeros(n_q, dtype=dtype)
        for t0 in range(start, end, tile_size):
            t1 = min(t0 + tile_size, end)
            logits = (qbar @ k[t0:t1].T) * dtype(scale)  # (C_q, t1-t0)
            m_new = np.maximum(m_loc, logits.max(axis=1))
            alpha = np.exp(m_loc - m_new)
            acc *= alpha * alpha
            w_bar *= alpha
            e_key = np.exp(logits - m_new[:, None])
            resid = (
                w_bar[:, None, None] * vbar[j][None, None, :]
                - e_key[:, :, None] * v[t0:t1][None, :, :]
            )
            acc += (resid * resid).sum(axis=(1, 2))
            m_loc = m_new
        # A sum accumulated at m_loc is exp(-2*m_loc) times the raw sum;
        # re-expressing it at the row reference multiplies by
        # exp(2*(m_loc - m_ref)), which is >= 1 since m_loc only rises.
        error_sum[:, j] = acc * np.exp(2.0 * (m_loc - m_ref))
    error_sum = q_model.sizes[:, None] * error_sum
    flops = n_q * k.shape[0] * value_aware_key_flops(d)
    return BlockErrorTable(
        error_sum=np.asarray(error_sum, dtype=np.float64),
        q_sizes=q_model.sizes.copy(),
        k_sizes=k_model.sizes.copy(),
        stabilizers=np.asarray(m_ref, dtype=np.float64),
        mode="valueAware",
        flops=flops,
    )

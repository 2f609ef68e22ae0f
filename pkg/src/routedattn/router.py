"""Routing: decide which (query cluster, key cluster) blocks get exact
attention and which fall back to centroid compensation.

The budget comes in two modes. `globalDensity` caps total selected entries
at floor(rho * N_q * N_k) and fills blocks in error-to-cost order across the
whole table. `perClusterTopP` first runs the cluster-mass top-p rule per
query-cluster row to fix a per-row entry budget, then fills each row in
error-to-cost order within its own budget.

The greedy fill is `fillRemainder` by default: blocks that do not fit are
skipped and the walk continues, so later smaller blocks can still use the
budget. Combined with the best-single-fitting-block fallback this guarantees
at least half the optimal selectable error mass (the classic knapsack
argument: max(prefix greedy, best single item) >= OPT/2, and the
fill-remainder walk dominates the prefix walk).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimator import BlockErrorTable, to_ratios
from .linalg import row_softmax

FILL_REMAINDER = "fillRemainder"
STOP_AT_FIRST_OVERFLOW = "stopAtFirstOverflow"


@dataclass(frozen=True)
class DensityBudget:
    """Compute budget for routing.

    mode "globalDensity" uses `rho` in [0, 1]; mode "perClusterTopP" uses
    `p` in (0, 1]. `overshoot` selects the greedy walk behaviour when a block
    does not fit.
    """

    mode: str
    rho: Optional[float] = None
    p: Optional[float] = None
    overshoot: str = FILL_REMAINDER

    def __post_init__(self):
        if self.mode == "globalDensity":
            if self.rho is None or not (0.0 <= self.rho <= 1.0):
                raise ValueError(f"globalDensity budget needs rho in [0, 1], got {self.rho}")
        elif self.mode == "perClusterTopP":
            if self.p is None or not (0.0 < self.p <= 1.0):
                raise ValueError(f"perClusterTopP budget needs p in (0, 1], got {self.p}")
        else:
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.overshoot not in (FILL_REMAINDER, STOP_AT_FIRST_OVERFLOW):
            raise ValueError(f"unknown overshoot policy {self.overshoot!r}")

    @staticmethod
    def global_density(rho: float, overshoot: str = FILL_REMAINDER) -> "DensityBudget":
        return DensityBudget(mode="globalDensity", rho=rho, overshoot=overshoot)

    @staticmethod
    def top_p(p: float, overshoot: str = FILL_REMAINDER) -> "DensityBudget":
        return DensityBudget(mode="perClusterTopP", p=p, overshoot=overshoot)


@dataclass(frozen=True)
class BlockMask:
    """Boolean routing decision per block, plus density accounting.

    True means the block is computed exactly; False means it is compensated.
    `density_entries` counts entries covered by selected blocks.
    """

    selected: np.ndarray  # (C_q, C_k) bool
    density_entries: int
    density: float


def mask_from_selected(selected: np.ndarray, block_sizes: np.ndarray) -> BlockMask:
    selected = np.asarray(selected, dtype=bool)
    entries = int(block_sizes[selected].sum())
    total = int(block_sizes.sum())
    return BlockMask(selected=selected, density_entries=entries, density=entries / total)


def expand_mask_entries(mask: BlockMask, q_sizes: np.ndarray, k_sizes: np.ndarray) -> np.ndarray:
    """Blow a block mask up to entry resolution (N_q, N_k), cluster-contiguous order."""
    return np.repeat(np.repeat(mask.selected, q_sizes, axis=0), k_sizes, axis=1)


def entry_capacity(rho: float, total_entries: int) -> int:
    """Entry budget implied by a target density."""
    # The epsilon guards against 0.25 * 65536 style products landing a hair
    # under the intended integer.
    return int(math.floor(rho * total_entries + 1e-9))


def _greedy_fill(order, weights: np.ndarray, capacity: int, overshoot: str) -> list:
    chosen = []
    remaining = capacity
    for item in order:
        w = int(weights[item])
        if w <= remaining:
            chosen.append(item)
            remaining -= w
        elif overshoot == STOP_AT_FIRST_OVERFLOW:
            break
    return chosen


def _apply_single_item_fallback(chosen, values: np.ndarray, weights: np.ndarray, capacity: int):
    """Swap to the best single fitting item when it beats the whole walk."""
    fits = np.flatnonzero(weights <= capacity)
    if fits.size == 0:
        return chosen
    best = fits[np.argmax(values[fits])]
    if values[best] > sum(float(values[i]) for i in chosen):
        return [int(best)]
    return chosen


def route_error_aware_entries(
    table: BlockErrorTable,
    capacity_entries: int,
    *,
    overshoot: str = FILL_REMAINDER,
    single_item_fallback: bool = True,
) -> BlockMask:
    """Greedy error-to-cost routing under an explicit entry budget."""
    c_q, c_k = table.error_sum.shape
    sizes = table.block_sizes
    flat_w = sizes.reshape(-1)
    flat_v = table.error_sum.reshape(-1)
    order = [b.q_cluster * c_k + b.k_cluster for b in to_ratios(table)]
    chosen = _greedy_fill(order, flat_w, capacity_entries, overshoot)
    if single_item_fallback:
        chosen = _apply_single_item_fallback(chosen, flat_v, flat_w, capacity_entries)
    selected = np.zeros(c_q * c_k, dtype=bool)
    selected[chosen] = True
    return mask_from_selected(selected.reshape(c_q, c_k), sizes)


def route_error_aware(
    table: BlockErrorTable,
    budget: DensityBudget,
    *,
    q_centroids: Optional[np.ndarray] = None,
    k_centroids: Optional[np.ndarray] = None,
    single_item_fallback: bool = True,
    size_weighted_scores: bool = True,
) -> BlockMask:
    """Greedy error-to-cost routing under the given budget.

    In perClusterTopP mode the per-row entry budgets come from
    `score_top_p_budget`, which needs the cluster centroids.
    """
    c_q, c_k = table.error_sum.shape
    sizes = table.block_sizes
    ranked = to_ratios(table)
    selected = np.zeros((c_q, c_k), dtype=bool)

    if budget.mode == "globalDensity":
        return route_error_aware_entries(
            table,
            entry_capacity(budget.rho, table.total_entries),
            overshoot=budget.overshoot,
            single_item_fallback=single_item_fallback,
        )
    else:
        if q_centroids is None or k_centroids is None:
            raise ValueError("perClusterTopP routing needs q_centroids and k_centroids")
        row_caps = score_top_p_budget(
            q_centroids,
            k_centroids,
            table.q_sizes,
            table.k_sizes,
            budget.p,
            size_weighted=size_weighted_scores,
        )
        for qc in range(c_q):
            row_order = [b.k_cluster for b in ranked if b.q_cluster == qc]
            chosen = _greedy_fill(row_order, sizes[qc], int(row_caps[qc]), budget.overshoot)
            if single_item_fallback:
                chosen = _apply_single_item_fallback(
                    chosen, table.error_sum[qc], sizes[qc], int(row_caps[qc])
                )
            selected[qc, chosen] = True
    return mask_from_selected(selected, sizes)


def _cluster_scores(
    q_centroids: np.ndarray,
    k_centroids: np.ndarray,
    k_sizes: np.ndarray,
    size_weighted: bool,
) -> np.ndarray:
    d = q_centroids.shape[1]
    scores = (q_centroids @ k_centroids.T) / math.sqrt(d)
    if size_weighted:
        # ln|cluster| matches the weight a compensated cluster carries in the
        # executor, so mass reflects what compensation would actually absorb.
        scores = scores + np.log(k_sizes.astype(np.float64))
    return scores


def score_top_p(
    q_centroids: np.ndarray,
    k_centroids: np.ndarray,
    q_sizes: np.ndarray,
    k_sizes: np.ndarray,
    p: float,
    *,
    size_weighted: bool = True,
) -> BlockMask:
    """Per-row minimal prefix of cluster mass reaching cumulative p.

    Each query-cluster row softmaxes its cluster scores; blocks are taken in
    descending mass order (ties to the lower key-cluster index) until the
    cumulative mass reaches p. p = 1 selects every block.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must be in (0, 1], got {p}")
    mass = row_softmax(_cluster_scores(q_centroids, k_centroids, k_sizes, size_weighted))
    c_q, c_k = mass.shape
    selected = np.zeros((c_q, c_k), dtype=bool)
    for qc in range(c_q):
        if p == 1.0:
            selected[qc] = True
            continue
        order = np.argsort(-mass[qc], kind="stable")
        cum = np.cumsum(mass[qc][order])
        cut = int(np.searchsorted(cum, p, side="left"))
        selected[qc, order[: min(cut, c_k - 1) + 1]] = True
    return mask_from_selected(selected, np.outer(q_sizes, k_sizes))


def score_top_p_budget(
    q_centroids: np.ndarray,
    k_centroids: np.ndarray,
    q_sizes: np.ndarray,
    k_sizes: np.ndarray,
    p: float,
    *,
    size_weighted: bool = True,
) -> np.ndarray:
    """Entry budget per query-cluster row implied by the top-p rule."""
    mask = score_top_p(q_centroids, k_centroids, q_sizes, k_sizes, p, size_weighted=size_weighted)
    return (mask.selected * np.outer(q_sizes, k_sizes)).sum(axis=1).astype(np.int64)


def route_score(
    q_centroids: np.ndarray,
    k_centroids: np.ndarray,
    q_sizes: np.ndarray,
    k_sizes: np.ndarray,
    budget: DensityBudget,
    *,
    size_weighted: bool = True,
) -> BlockMask:
    """Cluster-mass routing under a global density budget.

    The density-matched form of the top-p baseline: blocks ranked by per-row
    softmax mass (rows each sum to one, so masses compare across rows),
    filled to the shared entry capacity. Lets score-based and error-aware
    policies be compared at identical density.
    """
    if budget.mode != "globalDensity":
        raise ValueError("route_score is defined for the globalDensity budget")
    mass = row_softmax(_cluster_scores(q_centroids, k_centroids, k_sizes, size_weighted))
    sizes = np.outer(q_sizes, k_sizes)
    c_q, c_k = mass.shape
    flat_mass = mass.reshape(-1)
    order = sorted(range(c_q * c_k), key=lambda i: (-flat_mass[i], i))
    capacity = entry_capacity(budget.rho, int(sizes.sum()))
    chosen = _greedy_fill(order, sizes.reshape(-1), capacity, budget.overshoot)
    selected = np.zeros(c_q * c_k, dtype=bool)
    selected[chosen] = True
    return mask_from_selected(selected.reshape(c_q, c_k), sizes)


def route_random(table: BlockErrorTable, budget: DensityBudget, seed: int) -> BlockMask:
    """Seeded uniform-random block order filled to the global capacity."""
    if budget.mode != "globalDensity":
        raise ValueError("the random baseline is defined for the globalDensity budget")
    sizes = table.block_sizes
    rng = np.random.default_rng(seed)
    order = rng.permutation(sizes.size)
    capacity = entry_capacity(budget.rho, table.total_entries)
    chosen = _greedy_fill(order, sizes.reshape(-1), capacity, budget.overshoot)
    selected = np.zeros(sizes.size, dtype=bool)
    selected[chosen] = True
    return mask_from_selected(selected.reshape(sizes.shape), sizes)


def relaxed_objective(table: BlockErrorTable, mask: BlockMask) -> float:
    """Total estimated error incurred by blocks routed to compensation."""
    return float(table.error_sum[~mask.selected].sum())

"""Experiment logic: density sweeps, approximation-bound verification, the
cluster-count study, and greedy-vs-oracle routing comparisons.

All policies in a sweep are evaluated at matched cost: each fills the same
global entry budget floor(rho * N_q * N_k), error-aware routing by
error-to-cost order, the cluster-mass baselines by per-row softmax mass,
random by seeded permutation, the oracle by exact knapsack. `topPDrop`
renormalizes over selected entries only (unselected logits at -inf, rows
with nothing selected become all-zero); every other policy compensates
unselected blocks through the executor.

Reported FLOP totals cover clustering (both sides), error estimation when
the policy consumes the error table, and the executor phases. Block scoring
for the mass baselines (O(C_q * C_k * d), negligible) is excluded.

Bound verification is statistical by design: the map-error bound is
conditional on the sparse map not perturbing the softmax normalizers much,
which random instances may violate. Reports therefore carry a
normalizer-shift diagnostic (max abs log-ratio of sparse to full
normalizers) instead of asserting the bound unconditionally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .attention import (
    AttentionResult,
    exact_block_flops,
    sparse_attend,
)
from .clustering import ClusterModel, kmeans, permute_rows, quality
from .estimator import (
    BlockErrorTable,
    estimate_errors,
    estimate_errors_streaming,
)
from .linalg import as_token_matrix
from .oracle import (
    AttentionMap,
    exact_entry_errors,
    full_attention,
    knapsack_oracle,
    map_mse,
    sparse_map_direct,
)
from .router import (
    BlockMask,
    DensityBudget,
    entry_capacity,
    expand_mask_entries,
    relaxed_objective,
    route_error_aware,
    route_error_aware_entries,
    route_random,
    route_score,
)

POLICIES = (
    "topPDrop",
    "topPCompensated",
    "errorAwareCompensated",
    "random",
    "oracleKnapsack",
)


# ---------------------------------------------------------------------------
# Synthetic instances


@dataclass(frozen=True)
class BlobSpec:
    """Gaussian blob mixture parameters for one (Q, K, V) instance."""

    n_q: int
    n_k: int
    d: int
    q_blobs: int = 4
    k_blobs: int = 4
    sigma: float = 0.1
    center_scale: float = 1.0


def make_blobs(
    n: int,
    d: int,
    num_blobs: int,
    sigma: float,
    rng: np.random.Generator,
    center_scale: float = 1.0,
):
    """Tokens drawn around `num_blobs` Gaussian centers, balanced labels.

    Returns (tokens, labels, centers).
    """
    centers = rng.normal(size=(num_blobs, d)) * center_scale
    labels = rng.permutation(np.resize(np.arange(num_blobs), n))
    tokens = centers[labels] + sigma * rng.normal(size=(n, d))
    return tokens, labels, centers


def make_blob_instance(spec: BlobSpec, seed: int):
    """One seeded (q, k, v) triple.

    Values are drawn around per-key-blob value centers, so centroid value
    compensation has signal to exploit.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    q, _, _ = make_blobs(spec.n_q, spec.d, spec.q_blobs, spec.sigma, rng, spec.center_scale)
    k, k_labels, _ = make_blobs(spec.n_k, spec.d, spec.k_blobs, spec.sigma, rng, spec.center_scale)
    v_centers = rng.normal(size=(spec.k_blobs, spec.d))
    v = v_centers[k_labels] + spec.sigma * rng.normal(size=(spec.n_k, spec.d))
    return q, k, v


def _separated_unique_rows(count: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct rows, quantized to 1/64 steps, min pairwise distance >= 1."""
    while True:
        base = np.round(rng.normal(size=(count, d)) * 2.0 * 64.0) / 64.0
        if count == 1:
            return base
        diffs = base[:, None, :] - base[None, :, :]
        dist = np.sqrt((diffs * diffs).sum(-1)) + np.eye(count) * 1e9
        if dist.min() >= 1.0:
            return base


def make_duplicate_instance(
    n_q: int,
    n_k: int,
    d: int,
    c_q: int,
    c_k: int,
    seed: int,
    *,
    duplicate_keys: bool = True,
):
    """Instance whose queries (and optionally keys+values) repeat in groups.

    Group counts must divide the token counts with a power-of-two quotient:
    means of 2^k identical rows are exact under pairwise summation, so
    cluster dispersion is bitwise zero, not merely small. Returns
    (q, k, v, q_bases, k_bases); feed the bases to kmeans via
    `init_centroids` to pin the clustering to the group structure.
    """
    checks = [(n_q, c_q, "query")]
    if duplicate_keys:
        checks.append((n_k, c_k, "key"))
    for n, c, side in checks:
        copies = n // c
        if n % c != 0 or copies & (copies - 1):
            raise ValueError(
                f"{side} count {n} over {c} groups needs a power-of-two group size"
            )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    q_bases = _separated_unique_rows(c_q, d, rng)
    q = np.repeat(q_bases, n_q // c_q, axis=0)
    q = q[rng.permutation(n_q)]
    if duplicate_keys:
        k_bases = _separated_unique_rows(c_k, d, rng)
        v_bases = np.round(rng.normal(size=(c_k, d)) * 64.0) / 64.0
        shuffle = rng.permutation(n_k)
        k = np.repeat(k_bases, n_k // c_k, axis=0)[shuffle]
        v = np.repeat(v_bases, n_k // c_k, axis=0)[shuffle]
    else:
        k_bases = None
        k = rng.normal(size=(n_k, d))
        v = rng.normal(size=(n_k, d))
    return q, k, v, q_bases, k_bases


# ---------------------------------------------------------------------------
# Pipeline state


@dataclass(frozen=True)
class Prepared:
    """Clustered, permuted instance ready for the sparse path."""

    q_raw: np.ndarray
    k_raw: np.ndarray
    v_raw: np.ndarray
    q_model: ClusterModel
    k_model: ClusterModel
    q: np.ndarray  # cluster-contiguous
    k: np.ndarray
    v: np.ndarray

    @property
    def n_q(self) -> int:
        return self.q.shape[0]

    @property
    def n_k(self) -> int:
        return self.k.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


def prepare(
    q_raw,
    k_raw,
    v_raw,
    c_q: int,
    c_k: int,
    *,
    seed: int = 0,
    restarts: int = 1,
    q_init_centroids=None,
    k_init_centroids=None,
) -> Prepared:
    """Cluster both sides and permute the instance cluster-contiguous."""
    q_raw = as_token_matrix(q_raw)
    k_raw = as_token_matrix(k_raw)
    v_raw = as_token_matrix(v_raw)
    if k_raw.shape[0] != v_raw.shape[0]:
        raise ValueError(
            f"key/value row counts differ: {k_raw.shape[0]} vs {v_raw.shape[0]}"
        )
    q_seed, k_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    q_model = kmeans(q_raw, c_q, seed=q_seed, restarts=restarts, init_centroids=q_init_centroids)
    k_model = kmeans(k_raw, c_k, seed=k_seed, restarts=restarts, init_centroids=k_init_centroids)
    return Prepared(
        q_raw=q_raw,
        k_raw=k_raw,
        v_raw=v_raw,
        q_model=q_model,
        k_model=k_model,
        q=permute_rows(q_raw, q_model),
        k=permute_rows(k_raw, k_model),
        v=permute_rows(v_raw, k_model),
    )


def build_error_table(prep: Prepared, mode: str = "valueAware", tile_size: int = 64) -> BlockErrorTable:
    if mode == "valueAware":
        return estimate_errors_streaming(
            prep.q_model, prep.k_model, prep.k, prep.v, tile_size=tile_size
        )
    if mode == "plain":
        return estimate_errors(prep.q_model, prep.k_model, prep.k)
    raise ValueError(f"unknown estimator mode {mode!r}")


# ---------------------------------------------------------------------------
# Policy evaluation


@dataclass(frozen=True)
class SweepRecord:
    policy: str
    density: float
    relaxed_objective: float
    map_mse: float
    output_mse: float
    flops_total: int
    seed: int
    cluster_counts: tuple


def drop_probs(prep: Prepared, mask: BlockMask) -> np.ndarray:
    """Selected-entries-only softmax; rows selecting nothing become zero."""
    entry = expand_mask_entries(mask, prep.q_model.sizes, prep.k_model.sizes)
    logits = (prep.q @ prep.k.T) / math.sqrt(prep.d)
    probs = np.zeros_like(logits)
    live = entry.any(axis=1)
    if live.any():
        masked = np.where(entry[live], logits[live], -np.inf)
        m = masked.max(axis=1, keepdims=True)
        w = np.where(entry[live], np.exp(masked - m), 0.0)
        probs[live] = w / w.sum(axis=1, keepdims=True)
    return probs


def _policy_mask(
    policy: str,
    prep: Prepared,
    table: BlockErrorTable,
    rho: float,
    seed: int,
    cell: int,
) -> BlockMask:
    budget = DensityBudget.global_density(rho)
    if policy == "errorAwareCompensated":
        return route_error_aware(table, budget)
    if policy in ("topPDrop", "topPCompensated"):
        return route_score(
            prep.q_model.centroids,
            prep.k_model.centroids,
            prep.q_model.sizes,
            prep.k_model.sizes,
            budget,
        )
    if policy == "random":
        return route_random(table, budget, seed * 1_000_003 + cell)
    if policy == "oracleKnapsack":
        return knapsack_oracle(table, entry_capacity(rho, table.total_entries))
    raise ValueError(f"unknown policy {policy!r}")


def evaluate_policy(
    policy: str,
    prep: Prepared,
    table: BlockErrorTable,
    mask: BlockMask,
    full_map: AttentionMap,
    full_out: np.ndarray,
    seed: int,
) -> SweepRecord:
    """Metrics for one (policy, mask) cell against the dense oracle."""
    base_flops = prep.q_model.flops + prep.k_model.flops
    if policy in ("errorAwareCompensated", "oracleKnapsack", "random"):
        base_flops += table.flops
    if policy == "topPDrop":
        probs = drop_probs(prep, mask)
        mse = map_mse(probs, full_map.probs)
        out = probs @ prep.v
        flops = base_flops + exact_block_flops(prep.d, mask.density_entries)
    else:
        result = sparse_attend(prep.q, prep.k, prep.v, prep.q_model, prep.k_model, mask)
        amap = sparse_map_direct(prep.q, prep.k, prep.q_model, prep.k_model, mask)
        mse = map_mse(amap, full_map)
        out = result.output
        flops = base_flops + result.flops.exact_block + result.flops.compensation
    diff = out - full_out
    return SweepRecord(
        policy=policy,
        density=mask.density,
        relaxed_objective=relaxed_objective(table, mask),
        map_mse=mse,
        output_mse=float(np.mean(diff * diff)),
        flops_total=int(flops),
        seed=seed,
        cluster_counts=(prep.q_model.num_clusters, prep.k_model.num_clusters),
    )


def sweep_one_seed(
    instance_fn: Callable[[int], tuple],
    policies: Sequence[str],
    densities: Sequence[float],
    seed: int,
    *,
    c_q: int,
    c_k: int,
    estimator_mode: str = "valueAware",
    restarts: int = 1,
) -> list:
    """All (policy, density) records for one seed, in grid order."""
    q_raw, k_raw, v_raw = instance_fn(seed)
    prep = prepare(q_raw, k_raw, v_raw, c_q, c_k, seed=seed, restarts=restarts)
    table = build_error_table(prep, estimator_mode)
    full_map, full_out = full_attention(prep.q, prep.k, prep.v)
    records = []
    for di, rho in enumerate(densities):
        for policy in policies:
            mask = _policy_mask(policy, prep, table, rho, seed, di)
            records.append(
                evaluate_policy(policy, prep, table, mask, full_map, full_out, seed)
            )
    return records


def policy_sweep(
    instance_fn: Callable[[int], tuple],
    policies: Sequence[str],
    densities: Sequence[float],
    seeds: Sequence[int],
    *,
    c_q: int,
    c_k: int,
    estimator_mode: str = "valueAware",
    restarts: int = 1,
) -> list:
    """Records for the full (policy, density, seed) grid.

    Output is ordered by (policy, density, seed) regardless of how the
    per-seed work is scheduled.
    """
    for policy in policies:
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
    if not densities:
        raise ValueError("density grid is empty")
    by_seed = {seed: sweep_one_seed(
        instance_fn, policies, densities, seed,
        c_q=c_q, c_k=c_k, estimator_mode=estimator_mode, restarts=restarts,
    ) for seed in seeds}
    ordered = []
    for pi, policy in enumerate(policies):
        for di in range(len(densities)):
            for seed in seeds:
                ordered.append(by_seed[seed][di * len(policies) + pi])
    return ordered


# ---------------------------------------------------------------------------
# Bound verification


@dataclass(frozen=True)
class BoundReport:
    lhs_mse: float
    estimated_term: float  # first right-hand term, prefactor included
    residual_term: float  # dispersion penalty
    rhs: float
    holds: bool
    slack: float  # rhs - lhs
    normalizer_shift: float  # max |log(Z_sparse / Z_full)| diagnostic


def verify_bound(prep: Prepared, mask: BlockMask) -> BoundReport:
    """Evaluate both sides of the map-error bound on one routed instance.

    LHS is the mean squared difference between the routed map and full
    attention. The estimated term weights per-entry centroid-proxy errors
    (query centroid standing in for each member) by the full map's squared
    normalizers; the residual term charges query dispersion at the worst key
    norm. The bound is conditional on normalizer stability, so `holds` is a
    report, not an assertion; `normalizer_shift` quantifies the perturbation
    when it fails.
    """
    full_map, _ = full_attention(prep.q, prep.k, prep.v)
    sparse = sparse_map_direct(prep.q, prep.k, prep.q_model, prep.k_model, mask)
    lhs = map_mse(sparse, full_map)

    qbar_rows = np.repeat(prep.q_model.centroids, prep.q_model.sizes, axis=0)
    ehat2, _ = exact_entry_errors(qbar_rows, prep.k, prep.k_model, stabilizers=full_map.row_max)
    entry = expand_mask_entries(mask, prep.q_model.sizes, prep.k_model.sizes)
    n_q, n_k = entry.shape
    est = (2.0 / (n_q * n_k)) * float(
        ((~entry) * ehat2 / (full_map.normalizers ** 2)[:, None]).sum()
    )

    delta_sq = quality(prep.q_model, prep.q_raw).delta_sq
    k_max = quality(prep.k_model, prep.k_raw).k_max
    resid = 8.0 * delta_sq * k_max ** 2 / (n_k * prep.d)
    rhs = est + resid

    log_z_full = np.log(full_map.normalizers) + full_map.row_max
    log_z_sparse = np.log(sparse.normalizers) + sparse.row_max
    shift = float(np.max(np.abs(log_z_sparse - log_z_full)))
    return BoundReport(
        lhs_mse=lhs,
        estimated_term=est,
        residual_term=resid,
        rhs=rhs,
        holds=lhs <= rhs,
        slack=rhs - lhs,
        normalizer_shift=shift,
    )


# ---------------------------------------------------------------------------
# Cluster-count study


@dataclass(frozen=True)
class StudyPoint:
    c_q: int
    delta_sq: float
    map_mse: float


def clustering_study(
    q_raw,
    k_raw,
    v_raw,
    q_cluster_counts: Sequence[int],
    c_k: int,
    p: float,
    *,
    seed: int = 0,
    restarts: int = 5,
) -> list:
    """Query dispersion and map error across query cluster counts.

    Each count's k-means pool includes a warm start from the previous
    count's centroids, so dispersion is non-increasing by construction, not
    by luck. The key clustering and the top-p budget rule stay fixed.
    """
    points = []
    prev_centroids = None
    for c_q in sorted(q_cluster_counts):
        prep = prepare(
            q_raw, k_raw, v_raw, c_q, c_k,
            seed=seed, restarts=restarts, q_init_centroids=prev_centroids,
        )
        prev_centroids = prep.q_model.centroids
        table = build_error_table(prep, "valueAware")
        mask = route_error_aware(
            table,
            DensityBudget.top_p(p),
            q_centroids=prep.q_model.centroids,
            k_centroids=prep.k_model.centroids,
        )
        full_map, _ = full_attention(prep.q, prep.k, prep.v)
        amap = sparse_map_direct(prep.q, prep.k, prep.q_model, prep.k_model, mask)
        points.append(
            StudyPoint(
                c_q=c_q,
                delta_sq=quality(prep.q_model, prep.q_raw).delta_sq,
                map_mse=map_mse(amap, full_map),
            )
        )
    return points


# ---------------------------------------------------------------------------
# Greedy vs oracle


@dataclass(frozen=True)
class RegretReport:
    ratios: tuple
    min_ratio: float
    mean_ratio: float


def greedy_vs_oracle(instances: Iterable[tuple]) -> RegretReport:
    """Selected-value ratio greedy/oracle over (table, capacity) instances.

    A ratio of 1.0 means the greedy walk matched the exact optimum; the
    fill-remainder walk plus single-item fallback guarantees >= 0.5.
    """
    ratios = []
    for table, capacity in instances:
        greedy = route_error_aware_entries(table, capacity)
        oracle = knapsack_oracle(table, capacity)
        g = float(table.error_sum[greedy.selected].sum())
        o = float(table.error_sum[oracle.selected].sum())
        ratios.append(1.0 if o == 0.0 else g / o)
    if not ratios:
        raise ValueError("no instances given")
    return RegretReport(
        ratios=tuple(ratios),
        min_ratio=min(ratios),
        mean_ratio=sum(ratios) / len(ratios),
    )

"""Token clustering for the block-sparse pipeline.

Queries and keys are clustered independently with Lloyd k-means
(k-means++ seeding), then reordered so each cluster occupies a contiguous
row range. The model records everything the sparse path needs: raw-order
assignments, per-cluster centroids and sizes, the permutation into
cluster-contiguous order, and the cluster start offsets in that order.

Determinism contracts, all load-bearing for the test suite:
  - distance ties assign to the lowest cluster index;
  - empty clusters are repaired by reseeding from the farthest token of a
    cluster that can spare one, never from a singleton;
  - the permutation is the stable argsort of assignments, so within a
    cluster tokens keep ascending original order;
  - centroid updates, `cluster_means`, and permuted segment means all
    gather member rows in that same ascending order and reduce with
    numpy's pairwise mean, so they agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_token_matrix


@dataclass(frozen=True)
class ClusterModel:
    """Result of clustering one token matrix."""

    num_clusters: int
    assignments: np.ndarray  # (n,) int, raw token order
    centroids: np.ndarray  # (num_clusters, d)
    sizes: np.ndarray  # (num_clusters,) int, all >= 1
    permutation: np.ndarray  # (n,) int; permuted[i] = tokens[permutation[i]]
    offsets: np.ndarray  # (num_clusters,) int, cluster start in permuted order
    flops: int = 0  # diagnostic estimate of the work spent fitting, all restarts


@dataclass(frozen=True)
class ClusterQuality:
    delta_sq: float  # mean squared token-to-centroid distance
    k_max: float  # max token l2 norm
    inertia: float  # sum of squared token-to-centroid distances


def _gather_mean(tokens: np.ndarray, member_index: np.ndarray) -> np.ndarray:
    # Copy-then-mean keeps numpy's pairwise reduction; identical members
    # with a power-of-two count therefore average exactly.
    return tokens[member_index].mean(axis=0)


def _sq_dists(tokens: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared distances (n, k), clipped at zero against rounding."""
    d2 = (
        (tokens * tokens).sum(axis=1, keepdims=True)
        - 2.0 * (tokens @ centers.T)
        + (centers * centers).sum(axis=1)
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(tokens: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = tokens.shape[0]
    centers = np.empty((k, tokens.shape[1]), dtype=tokens.dtype)
    chosen = np.zeros(n, dtype=bool)
    idx = int(rng.integers(n))
    centers[0] = tokens[idx]
    chosen[idx] = True
    d2 = ((tokens - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # All tokens coincide with chosen centers (duplicates); take the
            # lowest unused index so later repair can still fill every cluster.
            idx = int(np.flatnonzero(~chosen)[0])
        centers[c] = tokens[idx]
        chosen[idx] = True
        d2 = np.minimum(d2, ((tokens - centers[c]) ** 2).sum(axis=1))
    return centers


def _pad_centers(tokens: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Grow a center set to k rows by repeated farthest-token selection."""
    centers = np.array(centers, dtype=np.float64, copy=True)
    if centers.ndim != 2 or centers.shape[1] != tokens.shape[1]:
        raise ValueError(
            f"init centroids must be 2-D with {tokens.shape[1]} columns, got {centers.shape}"
        )
    if centers.shape[0] > k:
        raise ValueError(f"got {centers.shape[0]} init centroids for {k} clusters")
    d2 = _sq_dists(tokens, centers).min(axis=1)
    while centers.shape[0] < k:
        idx = int(np.argmax(d2))
        centers = np.vstack([centers, tokens[idx]])
        d2 = np.minimum(d2, ((tokens - tokens[idx]) ** 2).sum(axis=1))
    return centers


def _lloyd(tokens: np.ndarray, k: int, max_iters: int, centers: np.ndarray):
    n = tokens.shape[0]
    prev_assign = None
    prev_inertia = np.inf
    assign = np.zeros(n, dtype=np.int64)
    iters = 0
    for _ in range(max_iters):
        iters += 1
        d2 = _sq_dists(tokens, centers)
        assign = d2.argmin(axis=1)  # ties resolve to the lowest cluster index
        own_d2 = d2[np.arange(n), assign]
        sizes = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(sizes == 0):
            donors = np.flatnonzero(sizes[assign] >= 2)
            donor = donors[np.argmax(own_d2[donors])]
            sizes[assign[donor]] -= 1
            sizes[c] += 1
            assign[donor] = c
            centers = centers.copy()
            centers[c] = tokens[donor]
            own_d2[donor] = 0.0
        inertia = float(own_d2.sum())
        assert inertia <= prev_inertia * (1.0 + 1e-9) + 1e-12, (
            "Lloyd inertia increased between iterations"
        )
        prev_inertia = inertia
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        centers = np.stack(
            [_gather_mean(tokens, np.flatnonzero(assign == c)) for c in range(k)]
        )
    # Diagnostic work estimate: k-means++ init plus per-iteration distance
    # matrix (multiply-add = 2) and centroid update.
    flops = 2 * n * k * tokens.shape[1] + iters * (
        2 * n * k * tokens.shape[1] + 2 * n * k + 2 * n * tokens.shape[1]
    )
    return assign, prev_inertia, flops


def kmeans(
    tokens,
    num_clusters: int,
    *,
    max_iters: int = 25,
    seed: int = 0,
    restarts: int = 1,
    init_centroids=None,
) -> ClusterModel:
    """Cluster token rows; returns the best of `restarts` seeded runs.

    The best run is the one with the lowest final inertia; ties keep the
    earliest restart. Every cluster in the result is non-empty.

    `init_centroids` adds one extra warm-started run to the pool (padded by
    farthest-token selection when it has fewer than num_clusters rows). A
    warm start from a coarser solution's centroids can only match or beat
    that solution, which makes dispersion monotone across nested cluster
    counts by construction.
    """
    tokens = as_token_matrix(tokens)
    n = tokens.shape[0]
    if num_clusters < 1:
        raise ValueError(f"num_clusters must be >= 1, got {num_clusters}")
    if num_clusters > n:
        raise ValueError(
            f"num_clusters ({num_clusters}) exceeds token count ({n})"
        )
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")

    starts = []
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r,)))
        starts.append(_kmeans_pp_init(tokens, num_clusters, rng))
    if init_centroids is not None:
        starts.append(_pad_centers(tokens, init_centroids, num_clusters))

    best = None
    total_flops = 0
    for centers in starts:
        assign, inertia, flops = _lloyd(tokens, num_clusters, max_iters, centers)
        total_flops += flops
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    assign = best[0]

    centroids = np.stack(
        [_gather_mean(tokens, np.flatnonzero(assign == c)) for c in range(num_clusters)]
    )
    sizes = np.bincount(assign, minlength=num_clusters)
    permutation = np.argsort(assign, kind="stable")
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    return ClusterModel(
        num_clusters=num_clusters,
        assignments=assign,
        centroids=centroids,
        sizes=sizes,
        permutation=permutation,
        offsets=offsets,
        flops=total_flops,
    )


def permute_rows(tokens: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Reorder raw-order rows into cluster-contiguous order (a pure gather)."""
    return tokens[model.permutation]


def inverse_permute_rows(tokens: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Undo `permute_rows` bitwise (a pure scatter)."""
    out = np.empty_like(tokens)
    out[model.permutation] = tokens
    return out


def cluster_means(model: ClusterModel, tokens: np.ndarray) -> np.ndarray:
    """Per-cluster means of `tokens` (raw order) under the model's assignments.

    With `tokens` equal to the matrix the model was fitted on this reproduces
    `model.centroids` bitwise. With a different matrix of the same length it
    gives companion centroids, e.g. value centroids under a key clustering.
    """
    if tokens.shape[0] != model.assignments.shape[0]:
        raise ValueError(
            f"token count {tokens.shape[0]} does not match model "
            f"({model.assignments.shape[0]} assignments)"
        )
    return np.stack(
        [
            _gather_mean(tokens, np.flatnonzero(model.assignments == c))
            for c in range(model.num_clusters)
        ]
    )


def expand_centroids(model: ClusterModel, tokens: np.ndarray) -> np.ndarray:
    """Per-token centroid rows: row i is the mean of token i's cluster."""
    return cluster_means(model, tokens)[model.assignments]


def segment_means(tokens_permuted: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Per-cluster means from a cluster-contiguous matrix.

    Equivalent to `cluster_means` on the raw-order matrix, bitwise, because
    the permutation is a stable sort.
    """
    out = np.empty((model.num_clusters, tokens_permuted.shape[1]), dtype=tokens_permuted.dtype)
    for c in range(model.num_clusters):
        start = model.offsets[c]
        out[c] = tokens_permuted[start : start + model.sizes[c]].mean(axis=0)
    return out


def quality(model: ClusterModel, tokens: np.ndarray) -> ClusterQuality:
    """Dispersion diagnostics used by the approximation-bound checker."""
    tokens = as_token_matrix(tokens)
    diffs = tokens - model.centroids[model.assignments]
    sq = (diffs * diffs).sum(axis=1)
    norms = np.sqrt((tokens * tokens).sum(axis=1))
    return ClusterQuality(
        delta_sq=float(sq.mean()),
        k_max=float(norms.max()),
        inertia=float(sq.sum()),
    )

"""Error-aware routed block-sparse attention with centroid compensation.

The pipeline: k-means cluster queries and keys, estimate per-block
approximation error, route blocks to exact computation or parameter-free
centroid compensation under a density budget, and execute with streaming
log-sum-exp accumulation. Analysis utilities reproduce the error-density
trade-off studies; the CLI wraps generation, runs, sweeps, and verification.
"""

from .attention import (
    AttentionResult,
    FlopCounters,
    compensation_flops,
    exact_block_flops,
    reference_sparse_output,
    sparse_attend,
)
from .clustering import ClusterModel, ClusterQuality, kmeans, permute_rows, quality
from .estimator import (
    BlockErrorTable,
    estimate_errors,
    estimate_errors_streaming,
    estimate_errors_value_aware,
    to_ratios,
)
from .oracle import (
    AttentionMap,
    CapabilityError,
    exact_entry_errors,
    full_attention,
    knapsack_oracle,
    knapsack_select,
    map_mse,
    sparse_map_direct,
)
from .router import (
    BlockMask,
    DensityBudget,
    entry_capacity,
    relaxed_objective,
    route_error_aware,
    route_random,
    route_score,
    score_top_p,
)
from .tensorio import TensorFormatError, read_tensor_file, write_tensor_file

__version__ = "0.1.0"

__all__ = [
    "AttentionMap",
    "AttentionResult",
    "BlockErrorTable",
    "BlockMask",
    "CapabilityError",
    "ClusterModel",
    "ClusterQuality",
    "DensityBudget",
    "FlopCounters",
    "TensorFormatError",
    "__version__",
    "compensation_flops",
    "entry_capacity",
    "estimate_errors",
    "estimate_errors_streaming",
    "estimate_errors_value_aware",
    "exact_block_flops",
    "exact_entry_errors",
    "full_attention",
    "kmeans",
    "knapsack_oracle",
    "knapsack_select",
    "map_mse",
    "permute_rows",
    "quality",
    "read_tensor_file",
    "reference_sparse_output",
    "relaxed_objective",
    "route_error_aware",
    "route_random",
    "route_score",
    "score_top_p",
    "sparse_attend",
    "sparse_map_direct",
    "to_ratios",
    "write_tensor_file",
]

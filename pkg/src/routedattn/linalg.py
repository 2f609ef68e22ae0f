"""Dense numeric primitives: validated token matrices, numerically stable
softmax, and streaming log-sum-exp merges.

Everything downstream (clustering, error estimation, the block-sparse
executor) builds on these kernels. Reference paths run in float64; the
executor may run in float32, and these functions preserve the dtype they
are given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions do not line up; the message names both shapes."""


def as_token_matrix(data, dtype=np.float64) -> np.ndarray:
    """Validate token data and return it as a contiguous 2-D array.

    Rejects anything that is not 2-D and any non-finite entry. The returned
    array is a copy unless the input already satisfies dtype and layout.
    """
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"token matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("token matrix contains non-finite entries")
    return arr


def matmul_transposed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return a @ b.T for row-token matrices sharing a feature dimension."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul_transposed expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"feature dimensions differ: left is {a.shape}, right is {b.shape}"
        )
    return a @ b.T


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Safe for logits of large magnitude: exponentials are taken only of
    non-positive shifted values.
    """
    if logits.ndim != 2:
        raise ShapeError(f"row_softmax expects a 2-D array, got shape {logits.shape}")
    if logits.shape[1] == 0:
        raise ShapeError("row_softmax needs at least one column")
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def log_sum_exp(values: np.ndarray) -> float:
    """Stable log(sum(exp(values))) for a non-empty 1-D array."""
    values = np.asarray(values)
    if values.ndim != 1 or values.shape[0] == 0:
        raise ShapeError(f"log_sum_exp expects a non-empty 1-D array, got {values.shape}")
    m = values.max()
    return float(m + np.log(np.exp(values - m).sum()))


@dataclass
class SoftmaxState:
    """Running softmax accumulator over one query row.

    Holds the running max `max_logit`, the normalizer `normalizer` expressed
    relative to that max, and the weighted contribution sum `acc` at the same
    scale. Seeding contracts live with the callers: the block-sparse executor
    seeds from the exact pass (max_logit = its log-sum-exp, normalizer = 1,
    acc = its normalized output) and uses max_logit = -inf, normalizer = 1,
    acc = 0 for rows with no exact work.
    """

    max_logit: float
    normalizer: float
    acc: np.ndarray

    def finalize(self) -> tuple[np.ndarray, float]:
        """Return (normalized output, log-sum-exp) for the absorbed stream."""
        return self.acc / self.normalizer, self.max_logit + float(np.log(self.normalizer))


def merge_lse(state: SoftmaxState, new_logit: float, contribution: np.ndarray) -> SoftmaxState:
    """Absorb one (logit, contribution) pair into a running softmax state.

    Rescales the existing normalizer and accumulator when the new logit
    raises the running max, so no exponential ever sees a positive argument.
    new_logit must be finite; the state's max may be -inf (empty seed).
    """
    m_new = max(state.max_logit, new_logit)
    # exp(-inf - finite) = 0 wipes an empty seed without a special case.
    alpha = np.exp(state.max_logit - m_new)
    p = np.exp(new_logit - m_new)
    state.normalizer = state.normalizer * alpha + p
    state.acc = state.acc * alpha + p * contribution
    state.max_logit = m_new
    return state

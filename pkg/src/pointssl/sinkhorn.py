"""Row softmax and Sinkhorn-Knopp normalization over prototype logits.

The teacher's soft assignments come from alternating column/row rescaling of
exp(logits / temperature): columns (prototypes) are pushed toward a uniform
marginal of B/K, rows (points) toward 1.  The student side is a plain
temperature softmax.  All reductions run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._arrays import frozen_array

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class LogitsBatch:
    """B x K prototype logits with a sharpening temperature."""

    values: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {v.shape}")
        if v.shape[1] < 2:
            raise ValueError("need at least 2 prototypes")
        if np.isnan(v).any() or np.isposinf(v).any():
            raise ValueError("logits must not contain NaN or +Inf")
        if np.isneginf(v).all(axis=1).any():
            raise ValueError("a row of all -Inf cannot be assigned")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "values", frozen_array(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class AssignmentMatrix:
    """B x K non-negative matrix whose rows sum to 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"assignments must be 2-D, got shape {v.shape}")
        if v.size and v.min() < 0.0:
            raise ValueError("assignments must be non-negative")
        if v.size and np.abs(v.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise ValueError("assignment rows must sum to 1 within 1e-6")
        object.__setattr__(self, "values", frozen_array(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _stabilized_exp(logits: LogitsBatch) -> np.ndarray:
    scaled = logits.values / logits.temperature
    return np.exp(scaled - scaled.max(axis=1, keepdims=True))


def softmax_rows(logits: LogitsBatch) -> AssignmentMatrix:
    """Row-wise softmax of values / temperature, stabilized by the row max."""
    m = _stabilized_exp(logits)
    return AssignmentMatrix(m / m.sum(axis=1, keepdims=True))


def sinkhorn_normalize(logits: LogitsBatch, iterations: int = 3) -> AssignmentMatrix:
    """Entropy-regularized soft assignment by alternating rescaling.

    Starting from exp(values / temperature - row max), each iteration first
    rescales every column to sum B/K (the uniform prototype marginal), then
    every row to sum 1.  The final row step makes the row-sum invariant
    exact.  Columns whose mass underflowed to zero are left at zero.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    m = _stabilized_exp(logits)
    b, k = m.shape
    column_target = b / k
    for _ in range(iterations):
        col_sums = m.sum(axis=0, keepdims=True)
        m *= np.divide(column_target, col_sums, out=np.zeros_like(col_sums), where=col_sums > 0.0)
        m /= m.sum(axis=1, keepdims=True)
    return AssignmentMatrix(m)

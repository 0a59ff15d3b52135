"""Clustering, Laplacian smoothing, and noise consistency losses with
analytic gradients.

Every loss returns (value, gradient) where the gradient is taken with
respect to the student-side input; teacher-side quantities are constants
(stop-gradient).  The losses are averaged over their own support (edges,
points, or pairs) so values are comparable across scene sizes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._arrays import frozen_array
from .geometry import KnnGraph
from .sinkhorn import AssignmentMatrix, LogitsBatch

PAIRWISE = "pairwise"
HUBER_RESIDUAL = "huber_residual"

DEFAULT_CORRESPONDENCE_CUTOFF = 0.05


@dataclass(frozen=True)
class EmbeddingBatch:
    """Per-point embeddings alongside the coordinates they are attached to."""

    values: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        p = np.asarray(self.positions, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("embeddings must be finite")
        if p.shape != (len(v), 3):
            raise ValueError("positions must be (N, 3) matching the embedding count")
        object.__setattr__(self, "values", frozen_array(v))
        object.__setattr__(self, "positions", frozen_array(p))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched (student, teacher) index pairs; student indices are unique."""

    student_indices: np.ndarray
    teacher_indices: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.student_indices, dtype=np.int64)
        t = np.asarray(self.teacher_indices, dtype=np.int64)
        if s.shape != t.shape or s.ndim != 1:
            raise ValueError("student and teacher index arrays must be 1-D and equal length")
        if len(np.unique(s)) != len(s):
            raise ValueError("student indices must be unique")
        object.__setattr__(self, "student_indices", frozen_array(s))
        object.__setattr__(self, "teacher_indices", frozen_array(t))

    def __len__(self) -> int:
        return len(self.student_indices)


@dataclass(frozen=True)
class LossConfig:
    """Weights and shapes of the full training objective.

    The clustering terms default to the 4:2:2 ratio.  laplacian_weight is
    the schedule's end value; the trainer interpolates the live coefficient.
    """

    unmask_weight: float = 4.0
    mask_weight: float = 2.0
    roll_weight: float = 2.0
    laplacian_weight: float = 3e-3
    consistency_weight: float = 0.05
    huber_delta: float = 0.5
    laplacian_form: str = HUBER_RESIDUAL

    def __post_init__(self):
        for name in ("unmask_weight", "mask_weight", "roll_weight",
                     "laplacian_weight", "consistency_weight"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if not self.huber_delta > 0.0:
            raise ValueError("huber_delta must be positive")
        if self.laplacian_form not in (PAIRWISE, HUBER_RESIDUAL):
            raise ValueError(f"unknown laplacian_form {self.laplacian_form!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values, the weighted total, and weighted gradients.

    total = unmask_weight*unmask + mask_weight*mask + roll_weight*roll
          + laplacian_coefficient*laplacian + consistency_weight*consistency.
    gradients maps term name to the already-weighted gradient tensor.
    """

    unmask: float
    mask: float
    roll: float
    laplacian: float
    consistency: float
    total: float
    gradients: dict[str, np.ndarray]


def _stable_log_softmax(logits: LogitsBatch) -> tuple[np.ndarray, np.ndarray]:
    scaled = logits.values / logits.temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    return log_p, np.exp(log_p)


def clustering_ce(
    q_teacher: AssignmentMatrix, p_student_logits: LogitsBatch
) -> tuple[float, np.ndarray]:
    """Cross-entropy of student softmax against fixed teacher assignments.

    L = -(1/B) sum_i sum_k q_ik log p_ik with p = softmax(logits / tau).
    Returns (L, dL/dlogits) where dL/dlogits = (p - q) / (B * tau).
    """
    q = q_teacher.values
    if q.shape != p_student_logits.shape:
        raise ValueError(
            f"shape mismatch: teacher {q.shape} vs student {p_student_logits.shape}"
        )
    b = q.shape[0]
    log_p, p = _stable_log_softmax(p_student_logits)
    terms = np.where(q > 0.0, q * log_p, 0.0)
    loss = -terms.sum() / b
    grad = (p - q) / (b * p_student_logits.temperature)
    return float(loss), grad


def adaptive_sigma(graph_distances: np.ndarray) -> float:
    """Median of the kNN distances (average of the middle two when even)."""
    d = np.asarray(graph_distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("cannot take the median of an empty distance list")
    return float(np.median(d))


def _laplacian_pairwise(values: np.ndarray, graph: KnnGraph) -> tuple[float, np.ndarray]:
    src, tgt, w = graph.source, graph.target, graph.weight
    diff = values[src] - values[tgt]
    per_edge = np.einsum("ij,ij->i", diff, diff)
    loss = float((w * per_edge).sum() / len(src))
    scaled = (2.0 / len(src)) * w[:, None] * diff
    grad = np.zeros_like(values)
    np.add.at(grad, src, scaled)
    np.add.at(grad, tgt, -scaled)
    return loss, grad


def _huber(t: np.ndarray, delta: float) -> np.ndarray:
    quad = 0.5 * t * t
    lin = delta * (t - 0.5 * delta)
    return np.where(t <= delta, quad, lin)


def _laplacian_huber_residual(
    values: np.ndarray, graph: KnnGraph, delta: float
) -> tuple[float, np.ndarray]:
    n = len(values)
    src, tgt, w = graph.source, graph.target, graph.weight

    w_sum = np.zeros(n)
    np.add.at(w_sum, src, w)
    neighbor_mean = np.zeros_like(values)
    np.add.at(neighbor_mean, src, w[:, None] * values[tgt])
    connected = w_sum > 0.0
    neighbor_mean[connected] /= w_sum[connected, None]

    residual = np.where(connected[:, None], values - neighbor_mean, 0.0)
    norms = np.linalg.norm(residual, axis=1)
    loss = float(_huber(norms, delta).sum() / n)

    # d huber(|r|)/dr: r in the quadratic regime, delta * r/|r| beyond it.
    scale = np.ones(n)
    beyond = norms > delta
    scale[beyond] = delta / norms[beyond]
    g = scale[:, None] * residual

    grad = g.copy()
    a = w / w_sum[src]
    np.add.at(grad, tgt, -a[:, None] * g[src])
    return loss, grad / n


def laplacian_loss(
    embeddings: EmbeddingBatch, graph: KnnGraph, config: LossConfig
) -> tuple[float, np.ndarray]:
    """Graph smoothness penalty on embeddings, in one of two forms.

    pairwise: mean over edges of w_ij * |z_i - z_j|^2.
    huber_residual: mean over points of Huber_delta(|z_i - weighted
    neighbor mean|), quadratic below delta and linear above.

    An empty edge set yields loss 0 (with a warning) and zero gradient.
    """
    values = embeddings.values
    if graph.num_nodes != len(values):
        raise ValueError(
            f"graph has {graph.num_nodes} nodes but batch has {len(values)} embeddings"
        )
    if graph.num_edges == 0:
        warnings.warn("Laplacian loss on an empty edge set is 0", stacklevel=2)
        return 0.0, np.zeros_like(values)
    if config.laplacian_form == PAIRWISE:
        return _laplacian_pairwise(values, graph)
    return _laplacian_huber_residual(values, graph, config.huber_delta)


def consistency_loss(
    teacher: EmbeddingBatch, student: EmbeddingBatch, pairs: CorrespondenceSet
) -> tuple[float, np.ndarray]:
    """Mean squared embedding discrepancy over matched pairs.

    R = (1/|P|) sum |z_teacher_j - z_student_i|^2.  The teacher side is
    constant; the gradient lands on the student rows:
    2 (z_student_i - z_teacher_j) / |P|.
    """
    if teacher.values.shape[1] != student.values.shape[1]:
        raise ValueError("teacher and student embedding dimensions differ")
    grad = np.zeros_like(student.values)
    if len(pairs) == 0:
        warnings.warn("consistency loss on an empty pair set is 0", stacklevel=2)
        return 0.0, grad
    si, tj = pairs.student_indices, pairs.teacher_indices
    diff = student.values[si] - teacher.values[tj]
    loss = float(np.einsum("ij,ij->", diff, diff) / len(pairs))
    grad[si] = (2.0 / len(pairs)) * diff
    return loss, grad


def match_correspondences(
    teacher_positions: np.ndarray,
    student_positions: np.ndarray,
    max_distance: float = DEFAULT_CORRESPONDENCE_CUTOFF,
    teacher_tree: cKDTree | None = None,
) -> CorrespondenceSet:
    """Nearest-teacher-point match for every student point, in a shared frame.

    Both position arrays must be expressed in the same pre-augmentation
    frame.  Pairs farther apart than max_distance are dropped.  Callers
    matching several student sets against one teacher set can pass a
    prebuilt teacher_tree.
    """
    teacher_positions = np.asarray(teacher_positions, dtype=np.float64)
    student_positions = np.asarray(student_positions, dtype=np.float64)
    if len(teacher_positions) == 0 or len(student_positions) == 0:
        warnings.warn("correspondence matching with an empty view", stacklevel=2)
        return CorrespondenceSet(np.empty(0, np.int64), np.empty(0, np.int64))
    tree = teacher_tree if teacher_tree is not None else cKDTree(teacher_positions)
    dist, nearest = tree.query(student_positions, k=1)
    keep = dist <= max_distance
    return CorrespondenceSet(np.flatnonzero(keep), nearest[keep])


def total_loss(
    unmask: tuple[float, np.ndarray],
    mask: tuple[float, np.ndarray],
    roll: tuple[float, np.ndarray],
    laplacian: tuple[float, np.ndarray],
    consistency: tuple[float, np.ndarray],
    config: LossConfig,
    laplacian_coefficient: float | None = None,
) -> LossBreakdown:
    """Combine the five loss terms into the full objective.

    Each argument is a (value, gradient) pair as produced by the individual
    losses.  laplacian_coefficient is the live scheduled value; it defaults
    to config.laplacian_weight.  Gradients combine linearly with the same
    weights as the values.
    """
    lam = config.laplacian_weight if laplacian_coefficient is None else laplacian_coefficient
    weights = {
        "unmask": config.unmask_weight,
        "mask": config.mask_weight,
        "roll": config.roll_weight,
        "laplacian": lam,
        "consistency": config.consistency_weight,
    }
    parts = {
        "unmask": unmask,
        "mask": mask,
        "roll": roll,
        "laplacian": laplacian,
        "consistency": consistency,
    }
    total = sum(weights[name] * parts[name][0] for name in parts)
    gradients = {name: weights[name] * parts[name][1] for name in parts}
    return LossBreakdown(
        unmask=float(unmask[0]),
        mask=float(mask[0]),
        roll=float(roll[0]),
        laplacian=float(laplacian[0]),
        consistency=float(consistency[0]),
        total=float(total),
        gradients=gradients,
    )

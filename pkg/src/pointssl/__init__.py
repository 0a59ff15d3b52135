"""Self-supervised clustering losses and geometric alignment for noisy
reconstructed point clouds.

Library surface:

- geometry: PointCloud, KnnGraph, Plane, RigidSimilarity, and the alignment
  stages (SOR filter, RANSAC plane, Z-up, scale, PCA normals).
- sinkhorn: teacher soft assignments and the student softmax.
- losses: clustering cross-entropy, Laplacian smoothing (pairwise and
  Huber-residual forms), noise consistency, and the combined objective,
  all with analytic gradients.
- model: point-wise MLP encoder, prototype head, EMA teacher, checkpoints.
- views: global/local crop generation, grid masking, noise augmentation.
- trainer: schedules and the full training loop.
- scenes: synthetic annotated room generator.
- pipeline: batch alignment with per-scene reports; PCA color export.
"""

from .geometry import (
    DegenerateGeometryError,
    EmptyCloudError,
    GeometryError,
    KnnGraph,
    Plane,
    PointCloud,
    RigidSimilarity,
    aabb_diagonal,
    align_z_up,
    build_knn_graph,
    detect_dominant_plane,
    estimate_normals,
    scale_align,
    sor_filter,
)
from .losses import (
    CorrespondenceSet,
    EmbeddingBatch,
    LossBreakdown,
    LossConfig,
    adaptive_sigma,
    clustering_ce,
    consistency_loss,
    laplacian_loss,
    match_correspondences,
    total_loss,
)
from .model import (
    EncoderParams,
    PrototypeHead,
    TeacherState,
    ema_update,
    encode,
    init_encoder,
    init_prototype_head,
    load_model,
    prototype_logits,
    save_model,
)
from .ply import read_ply, write_ply
from .scenes import GroundTruth, SceneSpec, generate_room
from .sinkhorn import AssignmentMatrix, LogitsBatch, sinkhorn_normalize, softmax_rows
from .trainer import (
    MetricsRecord,
    Schedule,
    TrainConfig,
    TrainState,
    init_train_state,
    prototype_usage_entropy,
    run_training,
    schedule_value,
    train_step,
)
from .views import View, ViewConfig, ViewSet, add_noise, grid_mask, make_views

__version__ = "0.1.0"

__all__ = [
    "AssignmentMatrix",
    "CorrespondenceSet",
    "DegenerateGeometryError",
    "EmbeddingBatch",
    "EmptyCloudError",
    "EncoderParams",
    "GeometryError",
    "GroundTruth",
    "KnnGraph",
    "LogitsBatch",
    "LossBreakdown",
    "LossConfig",
    "MetricsRecord",
    "Plane",
    "PointCloud",
    "PrototypeHead",
    "RigidSimilarity",
    "SceneSpec",
    "Schedule",
    "TeacherState",
    "TrainConfig",
    "TrainState",
    "View",
    "ViewConfig",
    "ViewSet",
    "aabb_diagonal",
    "adaptive_sigma",
    "add_noise",
    "align_z_up",
    "build_knn_graph",
    "clustering_ce",
    "consistency_loss",
    "detect_dominant_plane",
    "ema_update",
    "encode",
    "estimate_normals",
    "generate_room",
    "grid_mask",
    "init_encoder",
    "init_prototype_head",
    "init_train_state",
    "laplacian_loss",
    "load_model",
    "make_views",
    "match_correspondences",
    "prototype_logits",
    "prototype_usage_entropy",
    "read_ply",
    "run_training",
    "save_model",
    "scale_align",
    "schedule_value",
    "sinkhorn_normalize",
    "softmax_rows",
    "sor_filter",
    "total_loss",
    "train_step",
    "write_ply",
]

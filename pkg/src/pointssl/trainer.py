"""Training loop: views -> encoders -> Sinkhorn targets -> losses -> AdamW + EMA.

One step generates views for every scene in the batch, encodes the full
global views with the EMA teacher, pools both views of all scenes into a
single Sinkhorn assignment, and trains the student on the masked global and
local views with the three clustering terms plus the Laplacian and
consistency regularizers.  Only the student receives gradients; the teacher
moves through the EMA alone.  A fixed seed reproduces the metrics stream
bit-for-bit (wall time aside).
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, build_knn_graph
from .losses import (
    EmbeddingBatch,
    LossConfig,
    clustering_ce,
    consistency_loss,
    laplacian_loss,
    match_correspondences,
)
from .model import (
    EncoderParams,
    PrototypeHead,
    TeacherState,
    encode_backward,
    encode_features,
    ema_update,
    init_encoder,
    init_prototype_head,
    init_teacher,
    point_features,
    prototype_logits_backward,
    save_model,
)
from .rng import make_rng
from .sinkhorn import AssignmentMatrix, LogitsBatch, sinkhorn_normalize
from .views import ViewConfig, make_views, noise_view


@dataclass(frozen=True)
class Schedule:
    """Time-varying coefficient: constant, linear, or cosine interpolation."""

    kind: str
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.kind == "constant" and self.end != self.start:
            object.__setattr__(self, "end", self.start)

    def value_at(self, step: int) -> float:
        if step < 0 or step > self.total_steps:
            warnings.warn(
                f"schedule step {step} outside [0, {self.total_steps}]; clamping",
                stacklevel=2,
            )
            step = min(max(step, 0), self.total_steps)
        if self.kind == "constant":
            return self.start
        t = step / self.total_steps
        if self.kind == "linear":
            return self.start + (self.end - self.start) * t
        return self.end + (self.start - self.end) * 0.5 * (1.0 + np.cos(np.pi * t))


def schedule_value(schedule: Schedule, step: int) -> float:
    return schedule.value_at(step)


def _schedule_from(spec, total_steps: int, default_kind="linear") -> Schedule:
    if isinstance(spec, Schedule):
        return spec
    if isinstance(spec, (int, float)):
        return Schedule("constant", float(spec), float(spec), total_steps)
    return Schedule(
        spec.get("kind", default_kind), float(spec["start"]), float(spec["end"]), total_steps
    )


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of a toy pre-training run; every field has a default.

    Defaults: 4:2:2 clustering weights, student temperature 0.1, teacher
    temperature 0.04 -> 0.07, Laplacian coefficient 2e-4 -> 3e-3 with a
    k=24 / 0.08 m graph, consistency coefficient 0.05, AdamW at 1e-3 with
    weight decay 0.04 -> 0.10; desk-scale widths keep the run fast.
    """

    total_steps: int = 2000
    batch_size: int = 4
    seed: int = 0

    num_prototypes: int = 64
    embed_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)

    student_temperature: float = 0.1
    teacher_temperature: Schedule | dict | float = field(
        default_factory=lambda: {"kind": "linear", "start": 0.04, "end": 0.07}
    )
    laplacian_schedule: Schedule | dict | float = field(
        default_factory=lambda: {"kind": "linear", "start": 2e-4, "end": 3e-3}
    )
    ema_momentum: Schedule | dict | float = field(
        default_factory=lambda: {"kind": "cosine", "start": 0.994, "end": 1.0}
    )
    weight_decay: Schedule | dict | float = field(
        default_factory=lambda: {"kind": "linear", "start": 0.04, "end": 0.10}
    )

    unmask_weight: float = 4.0
    mask_weight: float = 2.0
    roll_weight: float = 2.0
    consistency_weight: float = 0.05
    huber_delta: float = 0.5
    laplacian_form: str = "huber_residual"
    laplacian_knn: int = 24
    laplacian_max_radius: float = 0.08
    correspondence_cutoff: float = 0.05
    sinkhorn_iterations: int = 3

    base_lr: float = 1e-3
    final_lr: float = 1e-5
    warmup_fraction: float = 0.05

    views: ViewConfig | dict = field(default_factory=ViewConfig)
    max_scene_points: int | None = None
    fixed_views: bool = False

    def __post_init__(self):
        for name in ("teacher_temperature", "laplacian_schedule", "ema_momentum", "weight_decay"):
            object.__setattr__(self, name, _schedule_from(getattr(self, name), self.total_steps))
        if isinstance(self.views, dict):
            object.__setattr__(self, "views", ViewConfig(**self.views))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def loss_config(self) -> LossConfig:
        return LossConfig(
            unmask_weight=self.unmask_weight,
            mask_weight=self.mask_weight,
            roll_weight=self.roll_weight,
            laplacian_weight=self.laplacian_schedule.end,
            consistency_weight=self.consistency_weight,
            huber_delta=self.huber_delta,
            laplacian_form=self.laplacian_form,
        )

    def lr_at(self, step: int) -> float:
        warmup = max(1, int(round(self.warmup_fraction * self.total_steps)))
        if step < warmup:
            return self.base_lr * (step + 1) / warmup
        t = (step - warmup) / max(1, self.total_steps - warmup)
        return self.final_lr + (self.base_lr - self.final_lr) * 0.5 * (1.0 + np.cos(np.pi * t))

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("teacher_temperature", "laplacian_schedule", "ema_momentum", "weight_decay"):
            sched = getattr(self, name)
            out[name] = {"kind": sched.kind, "start": sched.start, "end": sched.end}
        out["hidden"] = list(self.hidden)
        return out

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        return TrainConfig(**data)


@dataclass
class MetricsRecord:
    """Per-step training metrics; appended monotonically in step."""

    step: int
    unmask: float
    mask: float
    roll: float
    laplacian: float
    consistency: float
    total: float
    prototype_entropy: float
    grad_norm: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    config: TrainConfig
    params: EncoderParams
    head: PrototypeHead
    teacher: TeacherState
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0


def init_train_state(config: TrainConfig) -> TrainState:
    params = init_encoder(9, config.hidden, config.embed_dim, seed=config.seed)
    head = init_prototype_head(config.embed_dim, config.num_prototypes, seed=config.seed)
    teacher = init_teacher(params, head, momentum=config.ema_momentum.start)
    return TrainState(config=config, params=params, head=head, teacher=teacher)


def prototype_usage_entropy(assignments) -> float:
    """Shannon entropy (nats) of the mean assignment over prototypes.

    Accepts an AssignmentMatrix, a 2-D array of assignment rows, or a list
    of either; the maximum is ln K at perfectly uniform usage.
    """
    if isinstance(assignments, AssignmentMatrix):
        rows = assignments.values
    elif isinstance(assignments, np.ndarray):
        rows = assignments
    else:
        stacked = [a.values if isinstance(a, AssignmentMatrix) else np.asarray(a) for a in assignments]
        if not stacked:
            raise ValueError("no assignments accumulated")
        rows = np.concatenate(stacked, axis=0)
    usage = rows.mean(axis=0)
    usage = usage / usage.sum()
    positive = usage[usage > 0.0]
    return float(-(positive * np.log(positive)).sum())


def _derive_seed(config: TrainConfig, step: int, scene_index: int, purpose: int) -> int:
    effective_step = 0 if config.fixed_views else step
    seq = np.random.SeedSequence((config.seed, effective_step, scene_index, purpose))
    return int(seq.generate_state(1, np.uint64)[0])


def _student_logit_grads(head: PrototypeHead, cache, grad_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return prototype_logits_backward(head, cache.embeddings, grad_logits)


class _GradAccumulator:
    def __init__(self, params: EncoderParams, head: PrototypeHead):
        self.params = params.zeros_like()
        self.head = np.zeros_like(head.projection)

    def add_encoder(self, grads: EncoderParams, scale: float) -> None:
        for target, source in zip(self.params.weights, grads.weights):
            target += scale * source
        for target, source in zip(self.params.biases, grads.biases):
            target += scale * source
        self.params.mask_token += scale * grads.mask_token

    def norm(self) -> float:
        total = float((self.head**2).sum())
        for t in self.params.tensors().values():
            total += float((t**2).sum())
        return float(np.sqrt(total))


def _adamw_step(state: TrainState, grads: _GradAccumulator) -> None:
    config = state.config
    lr = config.lr_at(state.step)
    wd = config.weight_decay.value_at(state.step)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    state.adam_t += 1
    bias1 = 1.0 - beta1**state.adam_t
    bias2 = 1.0 - beta2**state.adam_t

    tensors = {f"encoder.{k}": (t, g) for (k, t), g in zip(
        state.params.tensors().items(), grads.params.tensors().values()
    )}
    tensors["head.projection"] = (state.head.projection, grads.head)

    for name, (param, grad) in tensors.items():
        m = state.adam_m.setdefault(name, np.zeros_like(param))
        v = state.adam_v.setdefault(name, np.zeros_like(param))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        # Decoupled weight decay on matrices only, not biases or the token.
        if name.endswith("weight") or name == "head.projection":
            update = update + wd * param
        param -= lr * update
    state.head.normalize_columns()


def train_step(state: TrainState, scenes: list[PointCloud]) -> tuple[TrainState, MetricsRecord]:
    """One optimization step over a batch of scenes.

    Aborts with a diagnostic on a non-finite loss rather than skipping the
    batch, so numeric bugs surface immediately.
    """
    t_start = time.perf_counter()
    config = state.config
    loss_cfg = config.loss_config()
    step = state.step
    tau_s = config.student_temperature
    tau_t = config.teacher_temperature.value_at(step)
    lam = config.laplacian_schedule.value_at(step)
    mu = config.consistency_weight

    # Phase A: views and teacher passes on the full global views.
    scene_views = []
    teacher_logits = []
    for i, scene in enumerate(scenes):
        views = make_views(scene, _derive_seed(config, step, i, 0), config.views)
        scene_views.append(views)
        for view in views.global_views:
            emb = encode_features(state.teacher.params, point_features(view.cloud))
            teacher_logits.append(emb.embeddings @ state.teacher.head.projection)

    # Phase B: one Sinkhorn over every point of both global views of the batch.
    pooled = np.concatenate(teacher_logits, axis=0)
    q_all = sinkhorn_normalize(
        LogitsBatch(pooled, tau_t), iterations=config.sinkhorn_iterations
    ).values
    q_split = np.split(q_all, np.cumsum([len(t) for t in teacher_logits])[:-1])

    grads = _GradAccumulator(state.params, state.head)
    sums = {"unmask": 0.0, "mask": 0.0, "roll": 0.0, "laplacian": 0.0, "consistency": 0.0}
    scale = 1.0 / len(scenes)

    for i, views in enumerate(scene_views):
        g0, g1 = views.global_views
        mask = views.mask
        q0, q1 = q_split[2 * i], q_split[2 * i + 1]

        cache_g0 = encode_features(state.params, point_features(g0.cloud), mask)
        logits_g0 = cache_g0.embeddings @ state.head.projection
        grad_logits_g0 = np.zeros_like(logits_g0)

        # Mask loss: distill the teacher's assignments on the masked points.
        if mask.any():
            rows = np.flatnonzero(mask)
            value, grad = clustering_ce(
                AssignmentMatrix(q0[rows]), LogitsBatch(logits_g0[rows], tau_s)
            )
            sums["mask"] += value
            grad_logits_g0[rows] += config.mask_weight * grad

        # Roll loss: swapped global views as targets, matched by proximity.
        pairs = match_correspondences(
            g1.original_positions, g0.original_positions, config.correspondence_cutoff
        )
        if len(pairs):
            value, grad = clustering_ce(
                AssignmentMatrix(q1[pairs.teacher_indices]),
                LogitsBatch(logits_g0[pairs.student_indices], tau_s),
            )
            sums["roll"] += value
            grad_logits_g0[pairs.student_indices] += config.roll_weight * grad

        # Unmask loss: local views against the pooled teacher globals.
        teacher_pos = np.concatenate([g0.original_positions, g1.original_positions])
        q_teacher = np.concatenate([q0, q1])
        teacher_tree = cKDTree(teacher_pos)
        local_caches, local_rows, local_q = [], [], []
        for local in views.local_views:
            cache = encode_features(state.params, point_features(local.cloud))
            lp = match_correspondences(
                teacher_pos, local.original_positions,
                config.correspondence_cutoff, teacher_tree=teacher_tree,
            )
            local_caches.append(cache)
            local_rows.append(lp.student_indices)
            local_q.append(q_teacher[lp.teacher_indices])
        matched_counts = [len(r) for r in local_rows]
        if sum(matched_counts) > 0:
            logits_locals = [
                c.embeddings[r] @ state.head.projection
                for c, r in zip(local_caches, local_rows)
            ]
            value, grad = clustering_ce(
                AssignmentMatrix(np.concatenate(local_q)),
                LogitsBatch(np.concatenate(logits_locals), tau_s),
            )
            sums["unmask"] += value
            offsets = np.cumsum([0] + matched_counts)
            for j, (cache, rows) in enumerate(zip(local_caches, local_rows)):
                if len(rows) == 0:
                    continue
                grad_view = np.zeros((len(cache.embeddings), q_all.shape[1]))
                grad_view[rows] = config.unmask_weight * grad[offsets[j]:offsets[j + 1]]
                g_emb, g_proj = _student_logit_grads(state.head, cache, grad_view)
                grads.head += scale * g_proj
                grads.add_encoder(encode_backward(state.params, cache, g_emb), scale)

        # Laplacian smoothing on the student's unmasked global view.
        grad_emb_g1 = None
        cache_g1 = None
        if lam > 0.0:
            cache_g1 = encode_features(state.params, point_features(g1.cloud))
            graph = build_knn_graph(
                g1.cloud, config.laplacian_knn, config.laplacian_max_radius
            )
            if graph.num_edges:
                value, grad = laplacian_loss(
                    EmbeddingBatch(cache_g1.embeddings, g1.cloud.positions), graph, loss_cfg
                )
                sums["laplacian"] += value
                grad_emb_g1 = lam * grad

        # Noise consistency between the noisy teacher view and the masked student view.
        grad_emb_g0 = None
        if mu > 0.0:
            xa = noise_view(
                g1, config.views.noise_sigma, config.views.noise_dropout,
                _derive_seed(config, step, i, 1),
            )
            teacher_emb = encode_features(state.teacher.params, point_features(xa.cloud))
            pairs_cons = match_correspondences(
                xa.original_positions, g0.original_positions, config.correspondence_cutoff
            )
            if len(pairs_cons):
                value, grad = consistency_loss(
                    EmbeddingBatch(teacher_emb.embeddings, xa.cloud.positions),
                    EmbeddingBatch(cache_g0.embeddings, g0.cloud.positions),
                    pairs_cons,
                )
                sums["consistency"] += value
                grad_emb_g0 = mu * grad

        # Backpropagate the masked-global-view gradients.
        g_emb, g_proj = _student_logit_grads(state.head, cache_g0, grad_logits_g0)
        if grad_emb_g0 is not None:
            g_emb = g_emb + grad_emb_g0
        grads.head += scale * g_proj
        grads.add_encoder(encode_backward(state.params, cache_g0, g_emb), scale)

        if grad_emb_g1 is not None:
            grads.add_encoder(encode_backward(state.params, cache_g1, grad_emb_g1), scale)

    for key in sums:
        sums[key] *= scale
    total = (
        config.unmask_weight * sums["unmask"]
        + config.mask_weight * sums["mask"]
        + config.roll_weight * sums["roll"]
        + lam * sums["laplacian"]
        + mu * sums["consistency"]
    )
    if not np.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss at step {step}: {sums}; aborting (batch of {len(scenes)} scenes)"
        )

    _adamw_step(state, grads)
    momentum = config.ema_momentum.value_at(step)
    state.teacher = ema_update(state.teacher, state.params, state.head, momentum)
    state.step += 1

    record = MetricsRecord(
        step=step,
        unmask=sums["unmask"],
        mask=sums["mask"],
        roll=sums["roll"],
        laplacian=sums["laplacian"],
        consistency=sums["consistency"],
        total=float(total),
        prototype_entropy=prototype_usage_entropy(q_all),
        grad_norm=grads.norm(),
        wall_time=time.perf_counter() - t_start,
    )
    return state, record


def _batch_for_step(scenes: list[PointCloud], config: TrainConfig, step: int) -> list[PointCloud]:
    rng = make_rng(config.seed, 20, step)
    indices = rng.choice(len(scenes), size=min(config.batch_size, len(scenes)), replace=False)
    return [scenes[int(j)] for j in indices]


def run_training(
    config: TrainConfig,
    scenes: list[PointCloud],
    out_dir=None,
) -> tuple[TrainState, list[MetricsRecord]]:
    """Run the full schedule over a scene corpus.

    When out_dir is given, writes metrics.jsonl (one record per step), the
    resolved config, and the final model checkpoint there.
    """
    if not scenes:
        raise ValueError("no training scenes")
    state = init_train_state(config)
    records: list[MetricsRecord] = []
    metrics_stream = None
    try:
        if out_dir is not None:
            from pathlib import Path

            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "config.json", "w") as f:
                json.dump(config.to_dict(), f, indent=2, sort_keys=True)
            metrics_stream = open(out / "metrics.jsonl", "w")
        for step in range(config.total_steps):
            batch = _batch_for_step(scenes, config, step)
            state, record = train_step(state, batch)
            records.append(record)
            if metrics_stream is not None:
                metrics_stream.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        if out_dir is not None:
            save_model(Path(out_dir) / "model.ckpt", state.params, state.head, state.teacher)
    finally:
        if metrics_stream is not None:
            metrics_stream.close()
    return state, records

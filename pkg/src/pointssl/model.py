"""Desk-scale point-wise encoder, prototype head, and EMA teacher.

The encoder is a per-point MLP over 9-D features (xyz + rgb + normal) with a
sigmoid-gated (SiLU) nonlinearity and L2-normalized output embeddings, so
prototype logits are cosine similarities.  Forward and backward passes are
written out explicitly; gradients are verified against finite differences in
the test suite.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .losses import EmbeddingBatch
from .rng import make_rng
from .sinkhorn import LogitsBatch

CHECKPOINT_MAGIC = b"LAM3C1"
NORM_EPS = 1e-8


@dataclass
class EncoderParams:
    """Weights, biases, and the learned mask token of the point-wise MLP."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mask_token: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        out["mask_token"] = self.mask_token
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.mask_token.copy(),
        )

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            np.zeros_like(self.mask_token),
        )


@dataclass
class PrototypeHead:
    """Linear projection onto K unit-norm prototype columns."""

    projection: np.ndarray

    @property
    def num_prototypes(self) -> int:
        return self.projection.shape[1]

    def copy(self) -> "PrototypeHead":
        return PrototypeHead(self.projection.copy())

    def normalize_columns(self) -> None:
        norms = np.linalg.norm(self.projection, axis=0, keepdims=True)
        self.projection /= np.maximum(norms, NORM_EPS)


@dataclass
class TeacherState:
    """EMA mirror of the student encoder and head."""

    params: EncoderParams
    head: PrototypeHead
    momentum: float = 0.996

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def init_encoder(
    input_dim: int = 9,
    hidden: tuple[int, ...] = (64, 64),
    output_dim: int = 32,
    seed: int = 0,
) -> EncoderParams:
    """He-initialized MLP parameters with a zero mask token."""
    rng = make_rng(seed, 0xE)
    dims = (input_dim, *hidden, output_dim)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    # A zero token would put every masked row at the normalization floor,
    # where the gradient blows up by 1/|raw|; start it at a generic point.
    mask_token = rng.normal(0.0, 0.5, size=input_dim)
    return EncoderParams(weights, biases, mask_token)


def init_prototype_head(embed_dim: int = 32, num_prototypes: int = 64, seed: int = 0) -> PrototypeHead:
    rng = make_rng(seed, 0xF)
    head = PrototypeHead(rng.normal(0.0, 1.0, size=(embed_dim, num_prototypes)))
    head.normalize_columns()
    return head


def init_teacher(params: EncoderParams, head: PrototypeHead, momentum: float = 0.996) -> TeacherState:
    return TeacherState(params.copy(), head.copy(), momentum)


def _silu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig * (1.0 + x * (1.0 - sig))


def point_features(cloud: PointCloud) -> np.ndarray:
    """9-D per-point features: coordinates, colors, normals.

    Missing colors or normals are zero-filled with a warning.
    """
    n = len(cloud)
    cols = cloud.colors
    nrms = cloud.normals
    missing = [name for name, arr in (("colors", cols), ("normals", nrms)) if arr is None]
    if missing:
        warnings.warn(f"substituting zeros for missing {' and '.join(missing)}", stacklevel=2)
    if cols is None:
        cols = np.zeros((n, 3))
    if nrms is None:
        nrms = np.zeros((n, 3))
    return np.concatenate([cloud.positions, cols, nrms], axis=1)


@dataclass
class EncodeCache:
    features: np.ndarray
    preactivations: list[np.ndarray]
    activations: list[np.ndarray]
    raw_output: np.ndarray
    safe_norms: np.ndarray
    floored: np.ndarray
    embeddings: np.ndarray
    mask: np.ndarray | None


def _check_finite(params: EncoderParams) -> None:
    for name, t in params.tensors().items():
        if not np.isfinite(t).all():
            raise ValueError(f"non-finite encoder parameter {name!r}")


def encode_features(
    params: EncoderParams, features: np.ndarray, mask: np.ndarray | None = None
) -> EncodeCache:
    """Forward pass over raw feature rows, keeping the backward cache.

    Masked rows (mask=True) have their features replaced by the learned mask
    token before the first layer.  Output rows are L2-normalized; rows whose
    raw norm falls below 1e-8 emit the first basis vector instead.
    """
    _check_finite(params)
    f = np.asarray(features, dtype=np.float64)
    if mask is not None:
        f = f.copy()
        f[mask] = params.mask_token

    h = f
    preacts, acts = [], []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = h @ w + b
        preacts.append(a)
        h, _ = _silu(a)
        acts.append(h)
    raw = h @ params.weights[-1] + params.biases[-1]

    norms = np.linalg.norm(raw, axis=1)
    floored = norms < NORM_EPS
    safe = np.where(floored, 1.0, norms)
    z = raw / safe[:, None]
    if floored.any():
        z[floored] = 0.0
        z[floored, 0] = 1.0
    return EncodeCache(f, preacts, acts, raw, safe, floored, z, mask)


def encode(
    params: EncoderParams, cloud: PointCloud, mask: np.ndarray | None = None
) -> EmbeddingBatch:
    """Per-point embeddings for a cloud; deterministic, unit-norm rows."""
    cache = encode_features(params, point_features(cloud), mask)
    return EmbeddingBatch(values=cache.embeddings, positions=cloud.positions)


def encode_backward(
    params: EncoderParams, cache: EncodeCache, grad_embeddings: np.ndarray
) -> EncoderParams:
    """Backpropagate d(loss)/d(embeddings) to all encoder parameters."""
    z, safe = cache.embeddings, cache.safe_norms
    g = np.asarray(grad_embeddings, dtype=np.float64)
    # Through row normalization: (g - z (z . g)) / |raw|; floored rows are constant.
    inner = np.einsum("ij,ij->i", z, g)
    g_raw = (g - z * inner[:, None]) / safe[:, None]
    g_raw[cache.floored] = 0.0

    grads = params.zeros_like()
    upstream = g_raw
    last = len(params.weights) - 1
    h_prev = cache.activations[-1] if cache.activations else cache.features
    grads.weights[last] = h_prev.T @ upstream
    grads.biases[last] = upstream.sum(axis=0)
    upstream = upstream @ params.weights[last].T

    for i in range(last - 1, -1, -1):
        _, dsilu = _silu(cache.preactivations[i])
        upstream = upstream * dsilu
        h_prev = cache.activations[i - 1] if i > 0 else cache.features
        grads.weights[i] = h_prev.T @ upstream
        grads.biases[i] = upstream.sum(axis=0)
        upstream = upstream @ params.weights[i].T

    if cache.mask is not None and cache.mask.any():
        grads.mask_token = upstream[cache.mask].sum(axis=0)
    return grads


def prototype_logits(
    head: PrototypeHead, embeddings: EmbeddingBatch, temperature: float = 1.0
) -> LogitsBatch:
    """Cosine-similarity logits: embeddings @ projection."""
    if embeddings.values.shape[1] != head.projection.shape[0]:
        raise ValueError(
            f"embedding dim {embeddings.values.shape[1]} does not match "
            f"head input dim {head.projection.shape[0]}"
        )
    return LogitsBatch(embeddings.values @ head.projection, temperature)


def prototype_logits_backward(
    head: PrototypeHead, embedding_values: np.ndarray, grad_logits: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (grad wrt embeddings, grad wrt projection)."""
    return grad_logits @ head.projection.T, embedding_values.T @ grad_logits


def ema_update(
    teacher: TeacherState,
    student_params: EncoderParams,
    student_head: PrototypeHead,
    momentum: float,
) -> TeacherState:
    """teacher <- momentum * teacher + (1 - momentum) * student.

    Prototype columns are re-normalized after the update.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    t_tensors = teacher.params.tensors()
    s_tensors = student_params.tensors()
    if set(t_tensors) != set(s_tensors) or any(
        t_tensors[k].shape != s_tensors[k].shape for k in t_tensors
    ):
        raise ValueError("teacher and student parameter shapes differ")

    new_params = EncoderParams(
        [momentum * tw + (1.0 - momentum) * sw
         for tw, sw in zip(teacher.params.weights, student_params.weights)],
        [momentum * tb + (1.0 - momentum) * sb
         for tb, sb in zip(teacher.params.biases, student_params.biases)],
        momentum * teacher.params.mask_token + (1.0 - momentum) * student_params.mask_token,
    )
    new_head = PrototypeHead(
        momentum * teacher.head.projection + (1.0 - momentum) * student_head.projection
    )
    new_head.normalize_columns()
    return TeacherState(new_params, new_head, momentum)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Flat binary container of named float32 tensors with a JSON header."""
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": len(payload)})
        payload += data.tobytes()
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(np.uint32(len(header)).tobytes())
        stream.write(header)
        stream.write(bytes(payload))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as stream:
        magic = stream.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        header_len = int(np.frombuffer(stream.read(4), dtype="<u4")[0])
        header = json.loads(stream.read(header_len).decode("utf-8"))
        payload = stream.read()
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).copy()
    return out


def _params_from_tensors(tensors: dict[str, np.ndarray], prefix: str) -> EncoderParams:
    weights, biases = [], []
    i = 0
    while f"{prefix}layer{i}.weight" in tensors:
        weights.append(tensors[f"{prefix}layer{i}.weight"].astype(np.float64))
        biases.append(tensors[f"{prefix}layer{i}.bias"].astype(np.float64))
        i += 1
    if not weights:
        raise ValueError(f"checkpoint has no encoder layers under prefix {prefix!r}")
    return EncoderParams(weights, biases, tensors[f"{prefix}mask_token"].astype(np.float64))


def save_model(
    path,
    params: EncoderParams,
    head: PrototypeHead,
    teacher: TeacherState | None = None,
) -> None:
    tensors = {f"student.{k}": v for k, v in params.tensors().items()}
    tensors["student.head.projection"] = head.projection
    if teacher is not None:
        tensors.update({f"teacher.{k}": v for k, v in teacher.params.tensors().items()})
        tensors["teacher.head.projection"] = teacher.head.projection
        tensors["teacher.momentum"] = np.array(teacher.momentum)
    save_checkpoint(path, tensors)


def load_model(path) -> tuple[EncoderParams, PrototypeHead, TeacherState | None]:
    tensors = load_checkpoint(path)
    params = _params_from_tensors(tensors, "student.")
    head = PrototypeHead(tensors["student.head.projection"].astype(np.float64))
    teacher = None
    if "teacher.head.projection" in tensors:
        momentum = np.asarray(tensors.get("teacher.momentum", 0.996)).reshape(-1)
        teacher = TeacherState(
            _params_from_tensors(tensors, "teacher."),
            PrototypeHead(tensors["teacher.head.projection"].astype(np.float64)),
            float(momentum[0]),
        )
    return params, head, teacher

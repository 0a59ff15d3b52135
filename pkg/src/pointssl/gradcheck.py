"""Finite-difference verification of every analytic gradient.

The checker perturbs each input coordinate by a central difference (step
1e-5, float64) and compares against the analytic gradient with the
norm-ratio metric |a - n| / max(|a|, |n|).  It is deliberately independent
of the code paths it checks: it only ever calls the losses for their scalar
values.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, build_knn_graph
from .losses import (
    CorrespondenceSet,
    EmbeddingBatch,
    LossConfig,
    clustering_ce,
    consistency_loss,
    laplacian_loss,
)
from .model import encode_backward, encode_features, init_encoder
from .rng import make_rng
from .sinkhorn import AssignmentMatrix, LogitsBatch, softmax_rows

FD_STEP = 1e-5
TOLERANCE = 1e-4


def finite_difference(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        up = fn(x)
        flat[i] = original - step
        down = fn(x)
        flat[i] = original
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-ratio gradient error: |a - n| / max(|a|, |n|, tiny)."""
    a = np.linalg.norm(analytic.ravel())
    n = np.linalg.norm(numeric.ravel())
    diff = np.linalg.norm((analytic - numeric).ravel())
    return float(diff / max(a, n, 1e-12))


def _check_clustering_ce(rng: np.random.Generator) -> float:
    b = int(rng.integers(2, 33))
    k = int(rng.integers(2, 17))
    tau = float(rng.uniform(0.05, 1.0))
    q = softmax_rows(LogitsBatch(rng.normal(0, 2, (b, k)))).values
    logits = rng.normal(0, 2, (b, k))

    _, analytic = clustering_ce(AssignmentMatrix(q), LogitsBatch(logits, tau))
    numeric = finite_difference(
        lambda x: clustering_ce(AssignmentMatrix(q), LogitsBatch(x, tau))[0], logits
    )
    return relative_error(analytic, numeric)


def _random_graph_instance(rng: np.random.Generator):
    n = int(rng.integers(6, 33))
    d = int(rng.integers(2, 17))
    positions = rng.uniform(0.0, 1.0, (n, 3))
    cloud = PointCloud(positions=positions)
    graph = build_knn_graph(cloud, k=int(rng.integers(2, 6)), max_radius=2.0)
    embeddings = rng.normal(0, 1, (n, d))
    return positions, graph, embeddings


def _check_laplacian(rng: np.random.Generator, form: str) -> float:
    while True:
        positions, graph, values = _random_graph_instance(rng)
        config = LossConfig(laplacian_form=form, huber_delta=float(rng.uniform(0.3, 1.5)))
        if form == "huber_residual":
            batch = EmbeddingBatch(values, positions)
            _, grad = laplacian_loss(batch, graph, config)
            # Redraw instances with a residual norm near the Huber kink,
            # where the curvature jump spoils the finite difference.
            src = graph.source
            w_sum = np.zeros(len(values))
            np.add.at(w_sum, src, graph.weight)
            mean = np.zeros_like(values)
            np.add.at(mean, src, graph.weight[:, None] * values[graph.target])
            ok = w_sum > 0
            mean[ok] /= w_sum[ok, None]
            norms = np.linalg.norm(np.where(ok[:, None], values - mean, 0.0), axis=1)
            if np.abs(norms - config.huber_delta).min() < 1e-3:
                continue
        break

    def value_of(x):
        return laplacian_loss(EmbeddingBatch(x, positions), graph, config)[0]

    _, analytic = laplacian_loss(EmbeddingBatch(values, positions), graph, config)
    numeric = finite_difference(value_of, values)
    return relative_error(analytic, numeric)


def _check_consistency(rng: np.random.Generator) -> float:
    n_s = int(rng.integers(4, 33))
    n_t = int(rng.integers(4, 33))
    d = int(rng.integers(2, 17))
    teacher = EmbeddingBatch(rng.normal(0, 1, (n_t, d)), rng.uniform(0, 1, (n_t, 3)))
    student_values = rng.normal(0, 1, (n_s, d))
    positions = rng.uniform(0, 1, (n_s, 3))
    n_pairs = int(rng.integers(1, n_s + 1))
    pairs = CorrespondenceSet(
        rng.choice(n_s, n_pairs, replace=False), rng.integers(0, n_t, n_pairs)
    )

    def value_of(x):
        return consistency_loss(teacher, EmbeddingBatch(x, positions), pairs)[0]

    _, analytic = consistency_loss(teacher, EmbeddingBatch(student_values, positions), pairs)
    numeric = finite_difference(value_of, student_values)
    return relative_error(analytic, numeric)


def _check_encoder(rng: np.random.Generator) -> float:
    params = init_encoder(9, (8, 8), 6, seed=int(rng.integers(0, 2**31)))
    n = int(rng.integers(3, 9))
    features = rng.normal(0, 1, (n, 9))
    mask = rng.random(n) < 0.3
    downstream = rng.normal(0, 1, (n, 6))

    cache = encode_features(params, features, mask)
    grads = encode_backward(params, cache, downstream)

    worst = 0.0
    tensors = params.tensors()
    analytic = grads.tensors()
    for name, tensor in tensors.items():
        def value_of(x, _name=name, _tensor=tensor):
            saved = _tensor.copy()
            _tensor[...] = x
            out = encode_features(params, features, mask)
            _tensor[...] = saved
            return float((out.embeddings * downstream).sum())

        numeric = finite_difference(value_of, tensor.copy())
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


def run_gradcheck(trials: int = 100, seed: int = 0, encoder_trials: int = 5) -> dict:
    """Run the finite-difference suite; returns per-loss max relative errors.

    Every entry must come in under 1e-4 for the suite to pass.
    """
    rng = make_rng(seed, 0xFD)
    checks = {
        "clustering_ce": lambda: _check_clustering_ce(rng),
        "laplacian_pairwise": lambda: _check_laplacian(rng, "pairwise"),
        "laplacian_huber_residual": lambda: _check_laplacian(rng, "huber_residual"),
        "consistency": lambda: _check_consistency(rng),
    }
    report = {}
    for name, check in checks.items():
        report[name] = max(check() for _ in range(trials))
    report["encoder"] = max(_check_encoder(rng) for _ in range(encoder_trials))
    report["tolerance"] = TOLERANCE
    report["passed"] = all(
        err < TOLERANCE for key, err in report.items()
        if key not in ("tolerance", "passed")
    )
    return report

"""Point-cloud containers, exact spatial search, and the scene alignment stages.

Alignment of a noisy reconstructed scene proceeds through the operations in
this module: statistical outlier removal, dominant-plane detection, Z-up
rotation with SVD refinement, bounding-box scale normalization, and per-point
PCA normals.  All operations are pure; clouds and graphs are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from ._arrays import frozen_array
from .rng import make_rng

UNIT_NORM_TOL = 1e-6
ORTHONORMAL_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometric failures."""


class EmptyCloudError(GeometryError):
    """Operation needs more points than the cloud provides."""


class DegenerateGeometryError(GeometryError):
    """Geometry has collapsed: zero extent, coincident points, or similar."""


_freeze = frozen_array


@dataclass(frozen=True)
class PointCloud:
    """Immutable point set with optional colors, normals, and validity mask.

    positions are meters, float64, shape (N, 3).  colors are in [0, 1],
    normals are unit vectors; both optional and, when present, the same
    length as positions.  Points with valid=False are ignored by every
    geometric operation.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise ValueError("positions must be finite (no NaN/Inf)")
        object.__setattr__(self, "positions", _freeze(pos))
        n = len(pos)

        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64)
            if col.shape != (n, 3):
                raise ValueError(f"colors must have shape ({n}, 3), got {col.shape}")
            if col.size and (col.min() < 0.0 or col.max() > 1.0):
                raise ValueError("colors must be component-wise in [0, 1]")
            object.__setattr__(self, "colors", _freeze(col))

        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != (n, 3):
                raise ValueError(f"normals must have shape ({n}, 3), got {nrm.shape}")
            norms = np.linalg.norm(nrm, axis=1)
            if nrm.size and np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
                raise ValueError("normals must have unit norm within 1e-6")
            object.__setattr__(self, "normals", _freeze(nrm))

        if self.valid is None:
            object.__setattr__(self, "valid", _freeze(np.ones(n, dtype=bool)))
        else:
            v = np.asarray(self.valid, dtype=bool)
            if v.shape != (n,):
                raise ValueError(f"valid mask must have shape ({n},), got {v.shape}")
            object.__setattr__(self, "valid", _freeze(v))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def valid_positions(self) -> np.ndarray:
        return self.positions[self.valid]

    def select(self, index: np.ndarray) -> "PointCloud":
        """Subset every per-point array by a boolean mask or index array."""
        return PointCloud(
            positions=self.positions[index],
            colors=None if self.colors is None else self.colors[index],
            normals=None if self.normals is None else self.normals[index],
            valid=self.valid[index],
        )


@dataclass(frozen=True)
class KnnGraph:
    """Directed kNN edges with Gaussian distance weights.

    Edges are stored as parallel arrays (source, target, distance, weight);
    weight = exp(-(distance / sigma)^2).  Edges beyond max_radius are absent
    and every stored distance is strictly positive.
    """

    k: int
    source: np.ndarray
    target: np.ndarray
    distance: np.ndarray
    weight: np.ndarray
    sigma: float
    max_radius: float
    num_nodes: int

    def __post_init__(self):
        object.__setattr__(self, "source", _freeze(np.asarray(self.source, dtype=np.int64)))
        object.__setattr__(self, "target", _freeze(np.asarray(self.target, dtype=np.int64)))
        object.__setattr__(self, "distance", _freeze(np.asarray(self.distance, dtype=np.float64)))
        object.__setattr__(self, "weight", _freeze(np.asarray(self.weight, dtype=np.float64)))
        if self.distance.size and self.distance.min() <= 0.0:
            raise ValueError("edge distances must be strictly positive")
        if np.any(self.source == self.target):
            raise ValueError("self-edges are not allowed")

    @property
    def num_edges(self) -> int:
        return len(self.source)


@dataclass(frozen=True)
class Plane:
    """Plane normal . x = offset with RANSAC inlier statistics."""

    normal: np.ndarray
    offset: float
    inlier_count: int
    inlier_ratio: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("plane normal must be unit length within 1e-9")
        object.__setattr__(self, "normal", _freeze(n))
        if not 0.0 <= self.inlier_ratio <= 1.0:
            raise ValueError("inlier_ratio must be in [0, 1]")


@dataclass(frozen=True)
class RigidSimilarity:
    """Similarity transform x -> scale * R @ x + translation with det(R) = +1."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation must be orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1 within 1e-9")
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def compose(self, inner: "RigidSimilarity") -> "RigidSimilarity":
        """Transform equivalent to applying `inner` first, then this one."""
        return RigidSimilarity(
            rotation=self.rotation @ inner.rotation,
            translation=self.scale * self.rotation @ inner.translation + self.translation,
            scale=self.scale * inner.scale,
        )

    @staticmethod
    def identity() -> "RigidSimilarity":
        return RigidSimilarity(np.eye(3), np.zeros(3), 1.0)


def _exact_neighbor_distances(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    # Recompute in a fixed order so results are bit-identical to a brute-force
    # reference regardless of how the tree accumulated its internal distances.
    diff = points[:, None, :] - points[neighbors]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_knn_graph(
    cloud: PointCloud,
    k: int,
    max_radius: float,
    sigma: float | str = "adaptive",
) -> KnnGraph:
    """Build the exact k-nearest-neighbor graph with Gaussian edge weights.

    Each point contributes up to k outgoing edges to its nearest neighbors by
    Euclidean distance; edges longer than max_radius are removed.  With
    sigma="adaptive" the scale is the median of the retained neighbor
    distances, otherwise the given fixed value is used.

    Raises:
        EmptyCloudError: fewer than 2 valid points.
        DegenerateGeometryError: all valid points coincide (sigma would be 0).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not max_radius > 0.0:
        raise ValueError("max_radius must be positive")
    valid_idx = np.flatnonzero(cloud.valid)
    if valid_idx.size < 2:
        raise EmptyCloudError("kNN graph needs at least 2 valid points")

    pts = cloud.positions[valid_idx]
    tree = cKDTree(pts)
    k_query = min(k + 1, len(pts))
    _, nbr = tree.query(pts, k=k_query)
    nbr = nbr.reshape(len(pts), k_query)
    dist = _exact_neighbor_distances(pts, nbr)

    rows = np.repeat(np.arange(len(pts)), k_query)
    cols = nbr.ravel()
    dvals = dist.ravel()
    # The k+1 query always contains a zero-distance entry (the point itself,
    # or a coincident duplicate), so dropping zero-distance edges leaves at
    # most k outgoing edges per point.
    keep = (rows != cols) & (dvals > 0.0) & (dvals <= max_radius)
    src, tgt, dvals, all_dvals = rows[keep], cols[keep], dvals[keep], dvals

    if dvals.size == 0:
        non_self = all_dvals[rows != cols]
        if non_self.size and non_self.max() == 0.0:
            raise DegenerateGeometryError("all valid points coincide; sigma would be 0")
        sigma_val = float(sigma) if sigma != "adaptive" else float("nan")
        return KnnGraph(k, np.empty(0, np.int64), np.empty(0, np.int64),
                        np.empty(0), np.empty(0), sigma_val, float(max_radius),
                        num_nodes=len(cloud))

    if sigma == "adaptive":
        sigma_val = float(np.median(dvals))
    else:
        sigma_val = float(sigma)
    if not sigma_val > 0.0:
        raise DegenerateGeometryError(f"sigma must be positive, got {sigma_val}")

    weights = np.exp(-((dvals / sigma_val) ** 2))
    return KnnGraph(
        k=k,
        source=valid_idx[src],
        target=valid_idx[tgt],
        distance=dvals,
        weight=weights,
        sigma=sigma_val,
        max_radius=float(max_radius),
        num_nodes=len(cloud),
    )


def mean_knn_distances(points: np.ndarray, k: int) -> np.ndarray:
    """Per-point mean distance to the k nearest neighbors (self excluded)."""
    tree = cKDTree(points)
    _, nbr = tree.query(points, k=k + 1)
    dist = _exact_neighbor_distances(points, nbr.reshape(len(points), k + 1))
    return dist[:, 1:].mean(axis=1)


def sor_filter(cloud: PointCloud, k: int = 16, std_mult: float = 2.0) -> PointCloud:
    """Statistical outlier removal.

    Removes points whose mean distance to their k nearest neighbors exceeds
    the global mean of those per-point means by more than std_mult population
    standard deviations.  Survivor order is preserved; invalid points are
    dropped.  With k or fewer valid points the cloud is returned unchanged
    and a warning is emitted.
    """
    if not std_mult > 0.0:
        raise ValueError("std_mult must be positive")
    valid_idx = np.flatnonzero(cloud.valid)
    if valid_idx.size <= k:
        warnings.warn(
            f"SOR skipped: {valid_idx.size} valid points <= k={k}", stacklevel=2
        )
        return cloud

    means = mean_knn_distances(cloud.positions[valid_idx], k)
    threshold = means.mean() + std_mult * means.std()
    return cloud.select(valid_idx[means <= threshold])


def _fit_plane_svd(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return normal, float(normal @ centroid)


def _canonical_sign(normal: np.ndarray, offset: float) -> tuple[np.ndarray, float]:
    dominant = int(np.argmax(np.abs(normal)))
    if normal[dominant] < 0:
        return -normal, -offset
    return normal, offset


def detect_dominant_plane(
    cloud: PointCloud,
    iterations: int = 512,
    inlier_threshold: float = 0.02,
    seed: int = 0,
    min_inlier_ratio: float = 0.15,
) -> Plane | None:
    """RANSAC dominant-plane detection with least-squares refit.

    Samples 3 points per iteration, keeps the hypothesis supporting the most
    points within inlier_threshold, then refits that plane to its inliers via
    the centroid and smallest singular direction.  Returns None when the
    refit plane supports fewer than min_inlier_ratio of the valid points
    (including the all-collinear case).  Deterministic for a fixed seed.
    """
    pts = cloud.valid_positions()
    n = len(pts)
    if n < 3:
        raise EmptyCloudError("plane detection needs at least 3 valid points")

    rng = make_rng(seed)
    samples = np.empty((iterations, 3), dtype=np.int64)
    for i in range(iterations):
        samples[i] = rng.choice(n, size=3, replace=False)

    p0, p1, p2 = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    if not ok.any():
        return None
    normals[ok] /= norms[ok, None]
    offsets = np.einsum("ij,ij->i", normals, p0)

    best_count = -1
    best_iter = -1
    block = 128
    for start in range(0, iterations, block):
        sl = slice(start, min(start + block, iterations))
        dist = np.abs(pts @ normals[sl].T - offsets[sl])
        counts = (dist <= inlier_threshold).sum(axis=0)
        counts[~ok[sl]] = 0
        local_best = int(np.argmax(counts))
        if counts[local_best] > best_count:
            best_count = int(counts[local_best])
            best_iter = start + local_best

    if best_count < 3:
        return None

    inliers = np.abs(pts @ normals[best_iter] - offsets[best_iter]) <= inlier_threshold
    normal, offset = _fit_plane_svd(pts[inliers])
    normal, offset = _canonical_sign(normal, offset)

    count = int((np.abs(pts @ normal - offset) <= inlier_threshold).sum())
    ratio = count / n
    if ratio < min_inlier_ratio:
        return None
    return Plane(normal=normal, offset=offset, inlier_count=count, inlier_ratio=ratio)


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation carrying unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(a @ b)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # Antiparallel: 180 degrees about any axis perpendicular to a.
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-12:
            axis = np.cross(a, np.array([0.0, 1.0, 0.0]))
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx * ((1.0 - c) / (s * s))


def _transform_cloud(cloud: PointCloud, transform: RigidSimilarity) -> PointCloud:
    normals = cloud.normals
    if normals is not None:
        normals = normals @ transform.rotation.T
    return replace(cloud, positions=transform.apply(cloud.positions), normals=normals)


def align_z_up(
    cloud: PointCloud,
    plane: Plane,
    inlier_threshold: float = 0.02,
) -> tuple[PointCloud, RigidSimilarity]:
    """Rotate the dominant plane to +Z, place it at z = 0, and refine by SVD.

    The plane normal sign is chosen so the majority of points end up above
    the plane (floors have mass above them).  After the initial rotation the
    inliers are recomputed within inlier_threshold, refit by least squares,
    and the residual correction applied.  Returns the transformed cloud and
    the composed transform (scale = 1).
    """
    pts = cloud.valid_positions()
    normal = np.asarray(plane.normal, dtype=np.float64)
    offset = float(plane.offset)

    signed = pts @ normal - offset
    if (signed > 0.0).sum() < (signed < 0.0).sum():
        normal, offset = -normal, -offset

    r0 = rotation_between(normal, np.array([0.0, 0.0, 1.0]))
    t0 = np.array([0.0, 0.0, -offset])
    first = RigidSimilarity(r0, t0, 1.0)

    moved = first.apply(pts)
    inliers = np.abs(moved[:, 2]) <= inlier_threshold
    transform = first
    if inliers.sum() >= 3:
        refit_normal, refit_offset = _fit_plane_svd(moved[inliers])
        if refit_normal[2] < 0:
            refit_normal, refit_offset = -refit_normal, -refit_offset
        r1 = rotation_between(refit_normal, np.array([0.0, 0.0, 1.0]))
        t1 = np.array([0.0, 0.0, -refit_offset])
        transform = RigidSimilarity(r1, t1, 1.0).compose(first)

    return _transform_cloud(cloud, transform), transform


def aabb_diagonal(cloud: PointCloud) -> float:
    """Diagonal length of the axis-aligned bounding box of the valid points."""
    pts = cloud.valid_positions()
    if len(pts) == 0:
        raise EmptyCloudError("aabb_diagonal of an empty cloud")
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def scale_align(cloud: PointCloud, s_target: float) -> tuple[PointCloud, RigidSimilarity]:
    """Scale the cloud about its centroid so the AABB diagonal equals s_target."""
    if not s_target > 0.0:
        raise ValueError("s_target must be positive")
    diagonal = aabb_diagonal(cloud)
    if diagonal <= 0.0:
        raise DegenerateGeometryError("cannot scale a cloud with zero diagonal")
    alpha = s_target / diagonal
    centroid = cloud.valid_positions().mean(axis=0)
    transform = RigidSimilarity(np.eye(3), (1.0 - alpha) * centroid, alpha)
    return _transform_cloud(cloud, transform), transform


def estimate_normals(
    cloud: PointCloud,
    k: int = 16,
    return_degenerate: bool = False,
) -> PointCloud | tuple[PointCloud, np.ndarray]:
    """Per-point normals from local PCA over the k-nearest neighborhoods.

    The normal is the eigenvector of the smallest covariance eigenvalue of
    each point's neighborhood (the point itself plus its k nearest
    neighbors).  Orientation: flipped to a non-negative z component; when the
    z component is below 1e-6, to non-negative x, then y.  Rank-deficient
    neighborhoods get normal +Z and are flagged; pass return_degenerate=True
    to receive the flag array.
    """
    valid_idx = np.flatnonzero(cloud.valid)
    if valid_idx.size <= k:
        raise EmptyCloudError(f"normal estimation needs more than k={k} valid points")

    pts = cloud.positions[valid_idx]
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k + 1)
    neighborhoods = pts[nbr]
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)

    normals = eigvecs[:, :, 0]
    degenerate = eigvals[:, 1] <= 1e-12 * np.maximum(eigvals[:, 2], 0.0)
    normals[degenerate] = (0.0, 0.0, 1.0)

    # Orientation: the first axis of (z, x, y) whose component clears 1e-6
    # decides the sign of the whole vector.
    sign = np.zeros(len(normals))
    for axis in (2, 0, 1):
        comp = normals[:, axis]
        use = (sign == 0.0) & (np.abs(comp) >= 1e-6)
        sign[use] = np.sign(comp[use])
    sign[sign == 0.0] = 1.0
    normals *= sign[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    full_normals = np.tile(np.array([0.0, 0.0, 1.0]), (len(cloud), 1))
    full_normals[valid_idx] = normals
    full_degenerate = np.ones(len(cloud), dtype=bool)
    full_degenerate[valid_idx] = degenerate

    out = replace(cloud, normals=full_normals)
    if return_degenerate:
        return out, full_degenerate
    return out

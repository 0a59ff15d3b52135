"""Teacher/student view generation: crops, masking, and noise augmentation.

A scene yields 2 global and 4 local views.  Every view keeps its source
indices into the scene and its pre-augmentation coordinates, so losses that
pair points across views can match them in the shared original frame.  All
randomness is drawn from the counter-based generator in `rng`, with one
stream per purpose, so a fixed seed reproduces views bit-for-bit and
skipping one consumer never shifts another.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import PointCloud
from .rng import make_rng

_STREAM_CROP = 1
_STREAM_MASK = 2
_STREAM_NOISE = 3

MIN_SCENE_POINTS = 256


@dataclass(frozen=True)
class ViewConfig:
    """Crop fractions, jitter magnitudes, and masking geometry."""

    num_global: int = 2
    num_local: int = 4
    global_crop_min: float = 0.4
    global_crop_max: float = 1.0
    local_crop_min: float = 0.10
    local_crop_max: float = 0.25
    jitter_sigma: float = 0.005
    color_jitter: float = 0.05
    grid_size: float = 0.1
    mask_ratio: float = 0.3
    noise_sigma: float = 0.01
    noise_dropout: float = 0.1


@dataclass(frozen=True)
class View:
    """One augmented crop plus the bookkeeping to undo it.

    cloud holds the augmented points.  source_indices map every view point
    back into the scene; original_positions are the scene-frame coordinates.
    The applied transform is p_view = rotation @ (flip * p_orig) + jitter,
    with the drawn jitter stored so it can be excluded when inverting.
    """

    cloud: PointCloud
    source_indices: np.ndarray
    original_positions: np.ndarray
    rotation: np.ndarray
    flip: np.ndarray
    jitter: np.ndarray

    def invert_positions(self) -> np.ndarray:
        """Recover original coordinates from the view (jitter excluded)."""
        unrotated = (self.cloud.positions - self.jitter) @ self.rotation
        return unrotated * self.flip


@dataclass(frozen=True)
class ViewSet:
    global_views: tuple[View, ...]
    local_views: tuple[View, ...]
    mask: np.ndarray  # on global_views[0], the masked student view
    seed: int


def _z_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _crop_indices(positions: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = len(positions)
    count = max(1, int(round(fraction * n)))
    if count >= n:
        return np.arange(n)
    center = positions[rng.integers(n)]
    d2 = ((positions - center) ** 2).sum(axis=1)
    nearest = np.argpartition(d2, count - 1)[:count]
    return np.sort(nearest)


def _make_view(scene: PointCloud, fraction: float, config: ViewConfig,
               rng: np.random.Generator) -> View:
    indices = _crop_indices(scene.positions, fraction, rng)
    original = scene.positions[indices]

    flip = np.ones(3)
    flip[:2] = np.where(rng.random(2) < 0.5, -1.0, 1.0)
    rotation = _z_rotation(rng.uniform(0.0, 2.0 * np.pi))
    jitter = (
        rng.normal(0.0, config.jitter_sigma, size=original.shape)
        if config.jitter_sigma > 0.0
        else np.zeros_like(original)
    )
    positions = (original * flip) @ rotation.T + jitter

    colors = None
    if scene.colors is not None:
        colors = scene.colors[indices]
        if config.color_jitter > 0.0:
            colors = np.clip(colors + rng.normal(0.0, config.color_jitter, colors.shape), 0.0, 1.0)

    normals = None
    if scene.normals is not None:
        normals = (scene.normals[indices] * flip) @ rotation.T

    cloud = PointCloud(
        positions=positions, colors=colors, normals=normals, valid=scene.valid[indices]
    )
    return View(cloud, indices, original, rotation, flip, jitter)


def grid_mask(
    view: PointCloud, grid_size: float, mask_ratio: float, seed: int
) -> np.ndarray:
    """Voxel-patch mask covering at least mask_ratio of the points.

    Points are partitioned into voxels of side grid_size; whole voxels are
    selected in random order until the masked fraction first reaches the
    ratio, so two points in the same voxel are always masked together.
    """
    if not grid_size > 0.0:
        raise ValueError("grid_size must be positive")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    n = len(view)
    mask = np.zeros(n, dtype=bool)
    if mask_ratio == 0.0 or n == 0:
        return mask

    voxels = np.floor(view.positions / grid_size).astype(np.int64)
    voxels -= voxels.min(axis=0)
    spans = voxels.max(axis=0) + 1
    if int(spans[0]) * int(spans[1]) * int(spans[2]) < 2**62:
        keys = (voxels[:, 0] * spans[1] + voxels[:, 1]) * spans[2] + voxels[:, 2]
        _, voxel_of_point, counts = np.unique(keys, return_inverse=True, return_counts=True)
    else:
        _, voxel_of_point, counts = np.unique(
            voxels, axis=0, return_inverse=True, return_counts=True
        )
    order = make_rng(seed, _STREAM_MASK).permutation(len(counts))
    needed = mask_ratio * n
    covered = 0
    chosen = np.zeros(len(counts), dtype=bool)
    for voxel in order:
        if covered >= needed:
            break
        chosen[voxel] = True
        covered += counts[voxel]
    mask[chosen[voxel_of_point]] = True
    return mask


def add_noise(
    view: PointCloud, sigma: float, dropout: float, seed: int
) -> tuple[PointCloud, np.ndarray]:
    """Gaussian coordinate perturbation plus uniform point dropout.

    Returns the noisy cloud and the indices of the surviving points in the
    input view, so callers can update their source-index records.
    """
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must lie in [0, 1)")
    rng = make_rng(seed, _STREAM_NOISE)
    kept = np.flatnonzero(rng.random(len(view)) >= dropout)
    noisy = view.select(kept)
    if sigma > 0.0:
        positions = noisy.positions + rng.normal(0.0, sigma, size=(len(kept), 3))
        noisy = replace(noisy, positions=positions)
    return noisy, kept


def noise_view(view: View, sigma: float, dropout: float, seed: int) -> View:
    """Apply add_noise to a view, updating its index and frame records.

    The added perturbation is folded into the stored jitter so the original
    frame stays recoverable.
    """
    noisy_cloud, kept = add_noise(view.cloud, sigma, dropout, seed)
    extra = noisy_cloud.positions - view.cloud.positions[kept]
    return View(
        cloud=noisy_cloud,
        source_indices=view.source_indices[kept],
        original_positions=view.original_positions[kept],
        rotation=view.rotation,
        flip=view.flip,
        jitter=view.jitter[kept] + extra,
    )


def make_views(scene: PointCloud, seed: int, config: ViewConfig = ViewConfig()) -> ViewSet:
    """Generate the 2 global + 4 local views of a scene, seeded.

    Global crops cover at least global_crop_min of the points, local crops
    local_crop_min..local_crop_max; every view gets its own z-rotation, axis
    flips, coordinate jitter, and color jitter.  View 0 of the globals
    carries the voxel-grid mask.
    """
    if len(scene) < MIN_SCENE_POINTS:
        raise ValueError(
            f"scene has {len(scene)} points; need at least {MIN_SCENE_POINTS}"
        )
    rng = make_rng(seed, _STREAM_CROP)
    globals_ = tuple(
        _make_view(scene, rng.uniform(config.global_crop_min, config.global_crop_max), config, rng)
        for _ in range(config.num_global)
    )
    locals_ = tuple(
        _make_view(scene, rng.uniform(config.local_crop_min, config.local_crop_max), config, rng)
        for _ in range(config.num_local)
    )
    mask = grid_mask(globals_[0].cloud, config.grid_size, config.mask_ratio, seed)
    return ViewSet(globals_, locals_, mask, seed)

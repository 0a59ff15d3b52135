import numpy as np
import pytest

from pointssl import EmptyCloudError, detect_dominant_plane

from conftest import make_cloud


def _noisy_plane_scene(rng, n_plane=2000, n_clutter=200, z=0.3, noise=0.005):
    plane = np.column_stack([
        rng.uniform(-1, 1, n_plane),
        rng.uniform(-1, 1, n_plane),
        rng.normal(z, noise, n_plane),
    ])
    clutter = rng.uniform(-1, 1, (n_clutter, 3))
    return np.concatenate([plane, clutter])


def test_recovers_generating_plane():
    rng = np.random.default_rng(0)
    points = _noisy_plane_scene(rng)
    plane = detect_dominant_plane(make_cloud(points), iterations=512,
                                  inlier_threshold=0.02, seed=1)
    assert plane is not None
    angle = np.degrees(np.arccos(min(abs(plane.normal[2]), 1.0)))
    assert angle < 1.0
    assert abs(abs(plane.offset) - 0.3) < 0.01
    assert plane.inlier_ratio > 0.8


def test_uniform_ball_has_no_dominant_plane():
    rng = np.random.default_rng(3)
    directions = rng.normal(size=(3000, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = directions * rng.random(3000)[:, None] ** (1 / 3)

    # Independent check: no plane hypothesis from many random triples gets
    # anywhere near the 15% inlier floor.
    best = 0
    for _ in range(300):
        idx = rng.choice(3000, 3, replace=False)
        p0, p1, p2 = points[idx]
        n = np.cross(p1 - p0, p2 - p0)
        if np.linalg.norm(n) < 1e-12:
            continue
        n = n / np.linalg.norm(n)
        count = (np.abs(points @ n - n @ p0) <= 0.02).sum()
        best = max(best, count)
    assert best / 3000 < 0.15

    plane = detect_dominant_plane(make_cloud(points), iterations=512,
                                  inlier_threshold=0.02, seed=0)
    assert plane is None


def test_three_exact_points():
    plane = detect_dominant_plane(
        make_cloud([[0, 0, 0], [1, 0, 0], [0, 1, 0]]),
        iterations=32, inlier_threshold=0.02, seed=0, min_inlier_ratio=0.0,
    )
    assert plane is not None
    np.testing.assert_allclose(np.abs(plane.normal), [0, 0, 1], atol=1e-12)
    assert plane.offset == pytest.approx(0.0, abs=1e-12)
    assert plane.inlier_count == 3


def test_collinear_points_not_found():
    points = np.column_stack([np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)])
    assert detect_dominant_plane(make_cloud(points), 64, 0.02, seed=0) is None


def test_too_few_points_raises():
    with pytest.raises(EmptyCloudError):
        detect_dominant_plane(make_cloud([[0, 0, 0], [1, 1, 1]]), 16, 0.02, seed=0)


def test_deterministic_for_fixed_seed():
    rng = np.random.default_rng(9)
    points = _noisy_plane_scene(rng, n_plane=500, n_clutter=400)
    cloud = make_cloud(points)
    a = detect_dominant_plane(cloud, 128, 0.02, seed=11)
    b = detect_dominant_plane(cloud, 128, 0.02, seed=11)
    np.testing.assert_array_equal(a.normal, b.normal)
    assert a.offset == b.offset and a.inlier_count == b.inlier_count

import numpy as np
import pytest

from pointssl import EmptyCloudError, estimate_normals

from conftest import make_cloud


def test_plane_normals():
    rng = np.random.default_rng(0)
    points = np.column_stack([rng.uniform(0, 2, 800), rng.uniform(0, 2, 800),
                              np.zeros(800)])
    cloud = estimate_normals(make_cloud(points), k=12)
    angles = np.degrees(np.arccos(np.clip(cloud.normals @ [0, 0, 1], -1, 1)))
    assert angles.max() < 1.0


def test_sphere_normals_radial():
    rng = np.random.default_rng(1)
    directions = rng.normal(size=(3000, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    cloud = estimate_normals(make_cloud(directions), k=16)
    # normals should agree with the radial direction up to sign
    cos = np.abs(np.einsum("ij,ij->i", cloud.normals, directions))
    angles = np.degrees(np.arccos(np.clip(cos, -1, 1)))
    assert np.percentile(angles, 99) < 5.0


def test_degenerate_neighborhood_flagged():
    # a pile of coincident points plus a line: rank < 2 everywhere
    points = np.concatenate([
        np.zeros((8, 3)),
        np.column_stack([np.linspace(1, 2, 8), np.zeros(8), np.zeros(8)]),
    ])
    cloud, degenerate = estimate_normals(make_cloud(points), k=4, return_degenerate=True)
    assert degenerate.all()
    np.testing.assert_array_equal(cloud.normals, np.tile([0.0, 0.0, 1.0], (16, 1)))


def test_orientation_conventions():
    rng = np.random.default_rng(2)
    # tilted plane: normals must point into the +Z hemisphere
    base = np.column_stack([rng.uniform(0, 2, 500), rng.uniform(0, 2, 500), np.zeros(500)])
    tilt = np.radians(30)
    rot = np.array([[1, 0, 0], [0, np.cos(tilt), -np.sin(tilt)],
                    [0, np.sin(tilt), np.cos(tilt)]])
    cloud = estimate_normals(make_cloud(base @ rot.T), k=12)
    assert (cloud.normals[:, 2] > 0).all()

    # vertical plane (normal perpendicular to z): +X rule decides the sign
    wall = np.column_stack([np.zeros(500), rng.uniform(0, 2, 500), rng.uniform(0, 2, 500)])
    cloud = estimate_normals(make_cloud(wall), k=12)
    assert (cloud.normals[:, 0] > 0.99).all()


def test_unit_norm_output():
    rng = np.random.default_rng(3)
    cloud = estimate_normals(make_cloud(rng.uniform(0, 1, (300, 3))), k=10)
    np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-9)


def test_needs_more_than_k_points():
    with pytest.raises(EmptyCloudError):
        estimate_normals(make_cloud(np.random.default_rng(0).uniform(0, 1, (10, 3))), k=10)

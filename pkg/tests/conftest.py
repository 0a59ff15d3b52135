import numpy as np
import pytest

from pointssl import PointCloud, SceneSpec, generate_room


def make_cloud(positions, **kwargs) -> PointCloud:
    return PointCloud(positions=np.asarray(positions, dtype=np.float64), **kwargs)


def toy_room(seed: int = 0, **overrides) -> PointCloud:
    """Small annotated room for training-path tests."""
    defaults = dict(
        extents=(1.6, 1.2, 0.8),
        surface_density=110.0,
        furniture_count=2,
        ghost_fraction=0.1,
        max_points=800,
        seed=seed,
    )
    defaults.update(overrides)
    cloud, _ = generate_room(SceneSpec(**defaults))
    return cloud


@pytest.fixture(scope="session")
def toy_scenes():
    return [toy_room(seed=100 + i) for i in range(8)]

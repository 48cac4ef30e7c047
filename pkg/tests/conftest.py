import numpy as np
import pytest

from gmot.geometry import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def seeded_cloud(n: int, d: int = 3, seed: int = 0, scale: float = 1.0) -> PointCloud:
    pts = scale * np.random.default_rng(seed).normal(size=(n, d))
    return PointCloud.uniform(pts)

"""Shared fixtures and independent oracles used across the suite."""

import numpy as np
import pytest

from scenelift.geometry import rot_up
from scenelift.harness import default_camera, sample_chair_database
from scenelift.template import build_template


@pytest.fixture(scope="session")
def chair_db():
    return sample_chair_database(40, seed=0)


@pytest.fixture(scope="session")
def template(chair_db):
    return build_template(chair_db)


@pytest.fixture(scope="session")
def camera():
    return default_camera(64)


def voxel_iou(a, b, n=64):
    """Brute-force IoU on an n^3 grid spanning both boxes.

    Independent of the analytic polygon-clipping path: membership is a
    plain point-in-box test per voxel center.
    """
    corners = np.vstack([a.corners(), b.corners()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    step = (hi - lo) / n
    axes = [lo[d] + (np.arange(n) + 0.5) * step[d] for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def inside(box):
        local = (pts - box.center) @ rot_up(box.azimuth)
        return np.all(np.abs(local) <= box.half_extents, axis=1)

    ia, ib = inside(a), inside(b)
    union = int(np.count_nonzero(ia | ib))
    if union == 0:
        return 0.0
    return np.count_nonzero(ia & ib) / union

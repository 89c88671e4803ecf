import numpy as np
import pytest

from sfmkit.se3 import Pose, exp_map


def random_pose(rng, rot_scale=1.0, trans_scale=1.0):
    xi = rng.normal(size=6)
    xi[:3] *= rot_scale
    xi[3:] *= trans_scale
    return exp_map(xi)


def random_correspondences(rel, n, rng, depth=(2.0, 8.0)):
    """Exact normalized correspondences for rel mapping frame-a into frame-b.

    Returns (xa, xb) homogeneous (n, 3) arrays with z = 1, all points with
    positive depth in both frames.
    """
    xa = np.empty((n, 3))
    xb = np.empty((n, 3))
    count = 0
    while count < n:
        p_a = np.append(rng.uniform(-1.0, 1.0, size=2), 1.0)
        p_a *= rng.uniform(*depth)
        p_b = rel.apply(p_a)
        if p_b[2] <= 0.1:
            continue
        xa[count] = p_a / p_a[2]
        xb[count] = p_b / p_b[2]
        count += 1
    return xa, xb


@pytest.fixture
def rng():
    return np.random.default_rng(42)

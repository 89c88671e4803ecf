import numpy as np
import pytest

from sfmkit.cameras import CameraModel, project
from sfmkit.errors import DimensionMismatch, InsufficientMatches
from sfmkit.features import (ExtractorConfig, FeatureSet, Keypoint, Match,
                             corner_response, extract_features, match_features,
                             verify_fundamental)
from sfmkit.se3 import Pose, exp_map

from conftest import random_pose


def _feature_set(descriptors, frame_id=0):
    descriptors = np.asarray(descriptors, dtype=float)
    descriptors = descriptors / np.linalg.norm(descriptors, axis=1, keepdims=True)
    kps = [Keypoint(float(i), 0.0) for i in range(len(descriptors))]
    return FeatureSet(frame_id, kps, descriptors)


# --- extraction -------------------------------------------------------------

def test_constant_image_yields_no_features():
    assert len(extract_features(np.full((64, 64), 7.0))) == 0


def test_single_bright_pixel():
    img = np.zeros((64, 64))
    img[30, 33] = 1.0
    fs = extract_features(img, ExtractorConfig(nms_radius=4))
    assert len(fs) >= 1
    d = np.hypot(fs.xy[:, 0] - 33, fs.xy[:, 1] - 30)
    assert d.min() <= 1.0


def test_checkerboard_matches_exhaustive_scan_oracle():
    cfg = ExtractorConfig(nms_radius=4)
    img = np.indices((64, 64)).sum(axis=0) % 16 // 8 * 1.0  # 8 px checkerboard
    fs = extract_features(img, cfg)

    # brute-force oracle: pixel-by-pixel NMS over the same response map
    resp = corner_response(img, cfg)
    threshold = max(cfg.abs_threshold, cfg.rel_threshold * resp.max())
    margin = cfg.patch_size // 2
    expected = set()
    h, w = img.shape
    for y in range(margin, h - margin):
        for x in range(margin, w - margin):
            if resp[y, x] <= threshold:
                continue
            window = resp[max(0, y - 4):y + 5, max(0, x - 4):x + 5]
            if resp[y, x] >= window.max():
                expected.add((x, y))
    got = {(int(k.x), int(k.y)) for k in fs.keypoints}
    assert got == expected
    assert len(fs) == len(expected)


def test_extraction_deterministic():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(48, 48))
    a = extract_features(img)
    b = extract_features(img.copy())
    assert a.xy.tobytes() == b.xy.tobytes()
    assert a.descriptors.tobytes() == b.descriptors.tobytes()


# --- matching ---------------------------------------------------------------

def test_match_identical_sets(rng):
    desc = rng.normal(size=(20, 16))
    a = _feature_set(desc, 0)
    b = _feature_set(desc, 1)
    matches = match_features(a, b, ratio=0.8)
    assert len(matches) == 20
    assert all(m.index_a == m.index_b for m in matches)
    assert all(m.distance < 1e-6 for m in matches)


def test_orthogonal_sets_rejected_by_ratio():
    a = _feature_set(np.eye(4)[:2], 0)
    b = _feature_set(np.eye(4)[2:], 1)
    assert match_features(a, b, ratio=0.8) == []


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        match_features(_feature_set(np.eye(3)), _feature_set(np.eye(4)))


def test_match_equals_brute_force_oracle(rng):
    da = rng.normal(size=(100, 32))
    db = rng.normal(size=(100, 32))
    a, b = _feature_set(da, 0), _feature_set(db, 1)
    got = {(m.index_a, m.index_b) for m in match_features(a, b, ratio=0.8)}

    # O(n^2) oracle with explicit loops
    dist = np.linalg.norm(a.descriptors[:, None, :] - b.descriptors[None, :, :], axis=2)
    expected = set()
    for ia in range(100):
        row = sorted(range(100), key=lambda j: (dist[ia, j], j))
        ib = row[0]
        col = sorted(range(100), key=lambda i: (dist[i, ib], i))
        if col[0] != ia:
            continue
        if dist[ia, row[0]] / dist[ia, row[1]] >= 0.8:
            continue
        colr = sorted((dist[i, ib] for i in range(100)))
        if colr[0] / colr[1] >= 0.8:
            continue
        expected.add((ia, ib))
    assert got == expected


def test_match_symmetric(rng):
    a = _feature_set(rng.normal(size=(50, 16)), 0)
    b = _feature_set(rng.normal(size=(60, 16)), 1)
    ab = {(m.index_a, m.index_b) for m in match_features(a, b)}
    ba = {(m.index_b, m.index_a) for m in match_features(b, a)}
    assert ab == ba


def test_match_sorted_by_index_a(rng):
    a = _feature_set(rng.normal(size=(30, 8)), 0)
    b = _feature_set(rng.normal(size=(30, 8)), 1)
    matches = match_features(a, b)
    assert [m.index_a for m in matches] == sorted(m.index_a for m in matches)


# --- geometric verification -------------------------------------------------

CAM = CameraModel("pinhole", 400.0, 400.0, 320.0, 240.0, 640, 480)


def _pixel_correspondences(rel, n, rng):
    pa, pb = [], []
    while len(pa) < n:
        p = np.array([rng.uniform(-1, 1), rng.uniform(-0.7, 0.7), rng.uniform(2, 8)])
        q = rel.apply(p)
        if q[2] < 0.2:
            continue
        ua = project(CAM, Pose.identity(), p)
        ub = CAM.project_camera_point(q)
        if not (0 <= ub[0] < 640 and 0 <= ub[1] < 480):
            continue
        pa.append(ua)
        pb.append(ub)
    return np.array(pa), np.array(pb)


def _as_matches(n):
    return [Match(i, i, 0.0) for i in range(n)]


def test_verify_all_exact_inliers(rng):
    rel = random_pose(rng, rot_scale=0.1, trans_scale=0.4)
    pa, pb = _pixel_correspondences(rel, 50, rng)
    mask, F = verify_fundamental(_as_matches(50), pa, pb, threshold_px=1.0)
    assert mask.all()
    s = np.linalg.svd(F, compute_uv=False)
    assert s[-1] / s[0] < 1e-9


def test_verify_separates_labeled_outliers(rng):
    rel = random_pose(rng, rot_scale=0.1, trans_scale=0.4)
    pa, pb = _pixel_correspondences(rel, 40, rng)
    out_a = np.column_stack([rng.uniform(0, 640, 10), rng.uniform(0, 480, 10)])
    out_b = np.column_stack([rng.uniform(0, 640, 10), rng.uniform(0, 480, 10)])
    pa = np.vstack([pa, out_a])
    pb = np.vstack([pb, out_b])
    mask, _ = verify_fundamental(_as_matches(50), pa, pb, threshold_px=1.0)
    assert mask[:40].all()
    assert not mask[40:].any()


def test_verify_insufficient_matches():
    with pytest.raises(InsufficientMatches):
        verify_fundamental(_as_matches(7), np.zeros((7, 2)), np.zeros((7, 2)))


def test_verify_deterministic(rng):
    rel = random_pose(rng, rot_scale=0.1, trans_scale=0.4)
    pa, pb = _pixel_correspondences(rel, 30, rng)
    pa_n = pa + np.random.default_rng(1).normal(scale=0.3, size=pa.shape)
    m1, F1 = verify_fundamental(_as_matches(30), pa_n, pb, threshold_px=2.0, seed=7)
    m2, F2 = verify_fundamental(_as_matches(30), pa_n, pb, threshold_px=2.0, seed=7)
    assert np.array_equal(m1, m2)
    assert F1.tobytes() == F2.tobytes()

import numpy as np
import pytest

from sfmkit.cameras import RigCalibration, project
from sfmkit.features import match_features
from sfmkit.io import read_manifest
from sfmkit.se3 import Pose, exp_map, log_map
from sfmkit.synth import (SceneSpec, SyntheticScene, generate_scene,
                          default_pairs, export_scene, ground_truth_trajectory)


def test_zero_noise_initial_equals_ground_truth():
    scene = generate_scene(SceneSpec(shape="line", n_frames=20), seed=3)
    for gt, init in zip(scene.gt_keyframes, scene.init_keyframes):
        assert gt.cam_from_world.almost_equal(init.cam_from_world, 1e-12)


def test_drift_grows_monotonically():
    scene = generate_scene(SceneSpec(shape="circle", n_frames=100,
                                     drift_per_step=0.01), seed=5)
    errs = [np.linalg.norm(log_map(i.cam_from_world @
                                   g.cam_from_world.inverse()))
            for g, i in zip(scene.gt_keyframes, scene.init_keyframes)]
    assert errs[0] < 1e-12
    assert errs[-1] > 0.1
    # systematic drift: error never shrinks along the trajectory
    assert all(b >= a - 1e-9 for a, b in zip(errs, errs[1:]))


def test_outlier_count_exact():
    spec = SceneSpec(shape="line", n_frames=15, outlier_fraction=0.1,
                     n_landmarks=200)
    scene = generate_scene(spec, seed=11)
    assert scene.outlier_labels
    for pair, ms in scene.matches.items():
        assert len(scene.outlier_labels[pair]) == int(np.floor(0.1 * len(ms)))


def test_outlier_labels_mark_real_corruption():
    spec = SceneSpec(shape="line", n_frames=10, outlier_fraction=0.2,
                     n_landmarks=150)
    scene = generate_scene(spec, seed=2)
    for (a, b), ms in scene.matches.items():
        bad = set(scene.outlier_labels[(a, b)])
        for k, m in enumerate(ms):
            lid_a = scene.observations[a][m.index_a][0]
            lid_b = scene.observations[b][m.index_b][0]
            if k in bad:
                assert lid_a != lid_b
            else:
                assert lid_a == lid_b


def test_observations_reproject_exactly():
    scene = generate_scene(SceneSpec(shape="figure-eight", n_frames=30),
                           seed=7)
    cam = scene.spec.camera
    for kf in scene.gt_keyframes:
        for lid, pixel in scene.observations[kf.frame_id]:
            pix = project(cam, kf.cam_from_world, scene.landmarks[lid])
            assert np.linalg.norm(pix - pixel) < 1e-12


def test_deterministic_generation():
    spec = SceneSpec(shape="circle", n_frames=25, pixel_sigma=0.5,
                     outlier_fraction=0.1)
    a = generate_scene(spec, seed=9)
    b = generate_scene(spec, seed=9)
    assert np.array_equal(a.landmarks, b.landmarks)
    assert a.matches == b.matches
    for f in a.features:
        assert np.array_equal(a.features[f].xy, b.features[f].xy)
        assert np.array_equal(a.features[f].descriptors,
                              b.features[f].descriptors)


def test_circle_closes_loop():
    traj = ground_truth_trajectory(SceneSpec(shape="circle", n_frames=80,
                                             length=40.0))
    step = np.linalg.norm(traj[1].t - traj[0].t)
    gap = np.linalg.norm(traj[-1].t - traj[0].t)
    assert gap < 1.5 * step    # trajectory returns to its start


def test_shapes_have_expected_extent():
    line = ground_truth_trajectory(SceneSpec(shape="line", n_frames=50,
                                             length=40.0))
    assert np.linalg.norm(line[-1].t - line[0].t) == pytest.approx(
        40.0 * 49 / 50, abs=1e-9)
    fig8 = ground_truth_trajectory(SceneSpec(shape="figure-eight",
                                             n_frames=50, length=48.0))
    xs = np.array([t.t[0] for t in fig8])
    assert xs.max() > 0 and xs.min() < 0    # crosses itself around origin


def test_rig_scene_layout():
    e1 = exp_map(np.array([0, 0, 0, 0.4, 0, 0]))
    e2 = exp_map(np.array([0, 0, 0, -0.4, 0, 0]))
    rig = RigCalibration((0, 1, 2), {0: Pose.identity(), 1: e1, 2: e2})
    spec = SceneSpec(shape="circle", n_frames=10, rig=rig)
    scene = generate_scene(spec, seed=1)
    assert len(scene.gt_keyframes) == 30
    # extrinsic consistency at every instant
    kf_by_id = {kf.frame_id: kf for kf in scene.gt_keyframes}
    for i in range(10):
        base = kf_by_id[3 * i].cam_from_world
        for j, cid in enumerate((0, 1, 2)):
            kf = kf_by_id[3 * i + j]
            assert kf.camera_id == cid
            assert kf.cam_from_world.almost_equal(
                rig.extrinsic(cid) @ base, 1e-9)
    # intra-rig pairs present in the default pair set
    pairs = default_pairs(spec, scene.gt_keyframes)
    assert (0, 1) in pairs and (0, 2) in pairs and (1, 2) in pairs


def test_descriptors_support_ratio_matching():
    scene = generate_scene(SceneSpec(shape="line", n_frames=8,
                                     n_landmarks=200), seed=4)
    a, b = scene.features[0], scene.features[1]
    found = match_features(a, b, ratio=0.8)
    truth = {(m.index_a, m.index_b) for m in scene.matches[(0, 1)]}
    got = {(m.index_a, m.index_b) for m in found}
    assert len(got & truth) >= 0.9 * len(truth)


def test_export_scene_round_trips(tmp_path):
    scene = generate_scene(SceneSpec(shape="circle", n_frames=12,
                                     drift_per_step=0.01), seed=6)
    export_scene(scene, tmp_path)
    manifest = read_manifest(tmp_path / "manifest.json")
    assert len(manifest.keyframes) == 12
    for kf, init in zip(manifest.keyframes, scene.init_keyframes):
        assert kf.cam_from_world.almost_equal(init.cam_from_world, 1e-9)
    from sfmkit.io import read_features, read_matches, read_tum
    feats = read_features(tmp_path / "features" / "frame000000.feat")
    assert np.array_equal(feats.xy, scene.features[0].xy)
    assert read_matches(tmp_path / "matches.bin") == scene.matches
    assert len(read_tum(tmp_path / "groundtruth.tum")) == 12


def test_bad_shape_rejected():
    with pytest.raises(ValueError):
        SceneSpec(shape="spiral")

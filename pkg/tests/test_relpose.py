import numpy as np
import pytest

from sfmkit.cameras import CameraModel
from sfmkit.errors import (DegenerateMotion, IllConditioned,
                           InsufficientMatches, NegativeScale)
from sfmkit.features import FeatureSet, Keypoint
from sfmkit.relpose import (RelPoseParams, TwoViewResult,
                            estimate_stereo_relative_pose,
                            estimate_translation_scale, joint_cost,
                            joint_refine, refine_residual_fn,
                            two_view_geometry)
from sfmkit.se3 import Pose, exp_map, pose_distance, rotation_angle
from sfmkit.solver import Problem, check_jacobian

CAM = CameraModel("pinhole", 500.0, 500.0, 320.0, 240.0, 640, 480)


def _landmarks(rng, n=120):
    return np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n),
                            rng.uniform(4, 10, n)])


def _frame(fid, landmarks, descs, cam_from_world, rng, noise_px=0.0):
    kps, ds = [], []
    for p, d in zip(landmarks, descs):
        q = cam_from_world.apply(p)
        if q[2] < 0.2:
            continue
        u = CAM.project_camera_point(q)
        u = u + rng.normal(scale=noise_px, size=2) if noise_px else u
        if not (0 <= u[0] < CAM.width and 0 <= u[1] < CAM.height):
            continue
        nd = d + rng.normal(scale=0.05, size=d.shape)
        kps.append(Keypoint(float(u[0]), float(u[1])))
        ds.append(nd / np.linalg.norm(nd))
    return FeatureSet(fid, kps, np.array(ds))


def _descriptors(rng, n=120, dim=16):
    d = rng.normal(size=(n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


GT_LEFT_FROM_MAP = exp_map(np.array([0.02, -0.05, 0.01, 1.2, 0.15, -0.3]))
CALIB = exp_map(np.array([0.0, 0.01, 0.0, 0.5, 0.0, 0.0]))  # left-from-right


def _triplet(rng, noise_px=0.0):
    """Feature sets for (map, left, right) looking at one landmark cloud."""
    lms = _landmarks(rng, n=200)
    descs = _descriptors(rng, n=200)
    map_pose = Pose.identity()                 # world = map camera frame
    left_pose = GT_LEFT_FROM_MAP
    right_pose = CALIB.inverse() @ left_pose
    return (_frame(0, lms, descs, map_pose, rng, noise_px),
            _frame(1, lms, descs, left_pose, rng, noise_px),
            _frame(2, lms, descs, right_pose, rng, noise_px))


def _rays(landmarks, pose):
    pts = np.array([pose.apply(p) for p in landmarks])
    return pts / pts[:, 2:3]


# --- two-view geometry ------------------------------------------------------

def test_two_view_noiseless_recovery(rng):
    fmap, fleft, _ = _triplet(rng)
    tv = two_view_geometry(fmap, fleft, CAM, CAM)
    gt = GT_LEFT_FROM_MAP
    assert rotation_angle(tv.rotation.T @ gt.R) < 1e-6
    d_gt = gt.t / np.linalg.norm(gt.t)
    assert np.linalg.norm(tv.translation_direction - d_gt) < 1e-6
    assert len(tv.inlier_matches) >= 50


def test_identical_frames_degenerate(rng):
    fmap, _, _ = _triplet(rng)
    with pytest.raises(DegenerateMotion):
        two_view_geometry(fmap, fmap, CAM, CAM)


def test_pure_rotation_degenerate(rng):
    lms = _landmarks(rng)
    descs = _descriptors(rng)
    rot_only = exp_map(np.array([0.0, -0.08, 0.02, 0, 0, 0]))
    fa = _frame(0, lms, descs, Pose.identity(), rng)
    fb = _frame(1, lms, descs, rot_only, rng)
    with pytest.raises(DegenerateMotion):
        two_view_geometry(fa, fb, CAM, CAM)


def test_two_view_insufficient_matches(rng):
    lms = _landmarks(rng, n=5)
    descs = _descriptors(rng, n=5)
    fa = _frame(0, lms, descs, Pose.identity(), rng)
    fb = _frame(1, lms, descs, GT_LEFT_FROM_MAP, rng)
    with pytest.raises(InsufficientMatches):
        two_view_geometry(fa, fb, CAM, CAM)


def test_two_view_noise_monte_carlo():
    rot_errs, dir_errs = [], []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        fmap, fleft, _ = _triplet(rng, noise_px=0.5)
        params = RelPoseParams(ransac_iters=300)
        tv = two_view_geometry(fmap, fleft, CAM, CAM, params)
        gt = GT_LEFT_FROM_MAP
        rot_errs.append(rotation_angle(tv.rotation.T @ gt.R))
        d_gt = gt.t / np.linalg.norm(gt.t)
        dir_errs.append(np.arccos(np.clip(tv.translation_direction @ d_gt, -1, 1)))
    assert np.percentile(rot_errs, 95) < np.radians(0.5)
    assert np.percentile(dir_errs, 95) < np.radians(1.0)


# --- translation scale ------------------------------------------------------

def _tv_from_pose(pose):
    d = pose.t / np.linalg.norm(pose.t)
    dummy = np.ones((1, 3))
    return TwoViewResult(pose.R, d, (), np.eye(3), dummy, dummy)


def test_scale_recovery_exact():
    lm = _tv_from_pose(GT_LEFT_FROM_MAP)
    mr_pose = GT_LEFT_FROM_MAP.inverse() @ CALIB
    mr = _tv_from_pose(mr_pose)
    s1, s2 = estimate_translation_scale(lm, mr, CALIB)
    assert s1 == pytest.approx(np.linalg.norm(GT_LEFT_FROM_MAP.t), abs=1e-9)
    assert s2 == pytest.approx(np.linalg.norm(mr_pose.t), abs=1e-9)


def test_scale_linearity():
    lm = _tv_from_pose(GT_LEFT_FROM_MAP)
    mr = _tv_from_pose(GT_LEFT_FROM_MAP.inverse() @ CALIB)
    s1, s2 = estimate_translation_scale(lm, mr, CALIB)
    doubled = Pose.from_rt(CALIB.R, 2.0 * CALIB.t)
    t1, t2 = estimate_translation_scale(lm, mr, doubled)
    assert t1 == pytest.approx(2 * s1, abs=1e-12 + 2e-12 * s1)
    assert t2 == pytest.approx(2 * s2, abs=1e-12 + 2e-12 * s2)


def test_scale_parallel_directions_ill_conditioned():
    R1 = np.eye(3)
    d = np.array([1.0, 0, 0])
    lm = TwoViewResult(R1, d, (), np.eye(3), np.ones((1, 3)), np.ones((1, 3)))
    mr = TwoViewResult(np.eye(3), d, (), np.eye(3), np.ones((1, 3)),
                       np.ones((1, 3)))
    with pytest.raises(IllConditioned):
        estimate_translation_scale(lm, mr, Pose.from_rt(np.eye(3),
                                                        np.array([1.0, 0, 0])))


def test_scale_negative_raises():
    d = np.array([1.0, 0, 0])
    lm = _tv_from_pose(Pose.from_rt(np.eye(3), d))
    mr = _tv_from_pose(Pose.from_rt(np.eye(3), np.array([0.0, 1.0, 0])))
    calib = Pose.from_rt(np.eye(3), np.array([-1.0, -1.0, 0]))
    with pytest.raises(NegativeScale):
        estimate_translation_scale(lm, mr, calib)


# --- joint refinement -------------------------------------------------------

def _exact_ray_matches(rng, n=60):
    lms = _landmarks(rng, n)
    x_map = _rays(lms, Pose.identity())
    x_left = _rays(lms, GT_LEFT_FROM_MAP)
    x_right = _rays(lms, CALIB.inverse() @ GT_LEFT_FROM_MAP)
    return (x_map, x_left), (x_right, x_map)

def test_joint_refine_exact_is_fixed_point(rng):
    lm, mr = _exact_ray_matches(rng)
    est = joint_refine(GT_LEFT_FROM_MAP, CALIB, lm, mr)
    assert est.residual < 1e-15
    dt, dr = pose_distance(est.pose, GT_LEFT_FROM_MAP)
    assert dt < 1e-9 and dr < 1e-9
    assert est.scale_left == pytest.approx(np.linalg.norm(GT_LEFT_FROM_MAP.t),
                                           abs=1e-9)


def test_joint_refine_recovers_perturbed_pose(rng):
    lm, mr = _exact_ray_matches(rng)
    baseline = np.linalg.norm(GT_LEFT_FROM_MAP.t)
    pert = exp_map(np.array([np.radians(1.0), 0, 0,
                             0.05 * baseline, 0, 0]))
    est = joint_refine(pert @ GT_LEFT_FROM_MAP, CALIB, lm, mr)
    dt, dr = pose_distance(est.pose, GT_LEFT_FROM_MAP)
    assert dt < 1e-6 and dr < 1e-6
    assert est.residual < 1e-15


def test_joint_refine_never_increases_cost(rng):
    lm, mr = _exact_ray_matches(rng)
    pert = exp_map(np.array([0.02, -0.01, 0.005, 0.03, 0.01, -0.02]))
    initial = pert @ GT_LEFT_FROM_MAP
    c0 = joint_cost(initial, CALIB, lm, mr)
    est = joint_refine(initial, CALIB, lm, mr)
    assert est.residual <= c0 + 1e-15


def test_refine_jacobian_matches_finite_differences(rng):
    lm, mr = _exact_ray_matches(rng, n=25)
    for _ in range(3):
        P = exp_map(rng.normal(scale=0.1, size=6)) @ GT_LEFT_FROM_MAP
        p = Problem()
        p.add_parameter_block("P", P, manifold="se3")
        p.add_residual_block(refine_residual_fn(CALIB, lm, mr), ["P"])
        assert check_jacobian(p, "P") < 1e-5


def test_joint_refine_noise_improves_pose():
    wins = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        lms = _landmarks(rng, 80)
        noise = lambda x: x + np.column_stack(
            [rng.normal(scale=0.5 / 500.0, size=(len(x), 2)), np.zeros(len(x))])
        lm = (noise(_rays(lms, Pose.identity())),
              noise(_rays(lms, GT_LEFT_FROM_MAP)))
        mr = (noise(_rays(lms, CALIB.inverse() @ GT_LEFT_FROM_MAP)),
              noise(_rays(lms, Pose.identity())))
        pert = exp_map(np.concatenate([rng.normal(scale=0.01, size=3),
                                       rng.normal(scale=0.02, size=3)]))
        initial = pert @ GT_LEFT_FROM_MAP
        est = joint_refine(initial, CALIB, lm, mr)
        e0 = np.linalg.norm(initial.t - GT_LEFT_FROM_MAP.t)
        e1 = np.linalg.norm(est.pose.t - GT_LEFT_FROM_MAP.t)
        wins.append(e1 <= e0)
    assert np.median(wins) == 1.0


# --- full SRE pipeline ------------------------------------------------------

def test_sre_noiseless_full_pose(rng):
    fmap, fleft, fright = _triplet(rng)
    est = estimate_stereo_relative_pose(fmap, fleft, fright, CAM, CAM, CAM,
                                        CALIB)
    dt, dr = pose_distance(est.pose, GT_LEFT_FROM_MAP)
    assert dt < 1e-6
    assert dr < 1e-6
    assert est.scale_left > 0 and est.scale_right > 0


def test_sre_disjoint_map_frame(rng):
    lms = _landmarks(rng)
    far = lms + np.array([500.0, 0.0, 0.0])
    d1, d2 = _descriptors(rng), _descriptors(rng)
    fmap = _frame(0, far, d1,
                  Pose.from_rt(np.eye(3), np.array([-500.0, 0, 0])), rng)
    fleft = _frame(1, lms, d2, GT_LEFT_FROM_MAP, rng)
    fright = _frame(2, lms, d2, CALIB.inverse() @ GT_LEFT_FROM_MAP, rng)
    with pytest.raises(InsufficientMatches) as ei:
        estimate_stereo_relative_pose(fmap, fleft, fright, CAM, CAM, CAM,
                                      CALIB)
    assert ei.value.stage == "left-map"


def test_sre_noise_translation_error():
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        fmap, fleft, fright = _triplet(rng, noise_px=0.5)
        params = RelPoseParams(ransac_iters=300)
        est = estimate_stereo_relative_pose(fmap, fleft, fright, CAM, CAM,
                                            CAM, CALIB, params)
        err = np.linalg.norm(est.pose.t - GT_LEFT_FROM_MAP.t)
        errs.append(err / np.linalg.norm(GT_LEFT_FROM_MAP.t))
    assert np.median(errs) < 0.02


def test_no_triangulation_in_module_source():
    import inspect
    import sfmkit.relpose as relpose
    src = inspect.getsource(relpose)
    assert "triangulat" not in src.lower()

"""Track building, triangulation and the two-stage bundle adjustment.

The map alternates RANSAC triangulation of pending tracks with bundle
adjustment and outlier pruning; the last pass tightens the threshold and
drops the robust loss.  Supported adjustment modes: pure mapping,
localization against a prior map (with the prior either frozen or softly
anchored), and rig-extrinsic refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import project, project_with_pose_jacobian, unproject
from .errors import (CheiralityViolation, InsufficientParallax, NoGauge,
                     ParallelRays)
from .keyframes import ROLLING_SHUTTER, Keyframe
from .posegraph import PoseEdge, _edge_residual_fn
from .se3 import (Pose, adjoint, exp_map, hat, log_map,
                  se3_left_jacobian_inv, se3_right_jacobian)
from .solver import (Problem, RobustLoss, SolverOptions, TRIVIAL_LOSS, solve)

PENDING = "pending"
TRIANGULATED = "triangulated"
FAILED = "failed"


@dataclass
class Observation:
    frame_id: int
    feature_index: int
    pixel: np.ndarray

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class Track:
    observations: list
    status: str = PENDING

    def __post_init__(self):
        if len(self.observations) < 2:
            raise ValueError("tracks need at least two observations")
        frames = [o.frame_id for o in self.observations]
        if len(set(frames)) != len(frames):
            raise ValueError("duplicate frame in track")


@dataclass
class Landmark:
    position: np.ndarray
    track: Track
    inlier_mask: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.inlier_mask = np.asarray(self.inlier_mask, dtype=bool)

    def inlier_observations(self):
        return [o for o, ok in zip(self.track.observations, self.inlier_mask)
                if ok]


@dataclass
class SparseMap:
    keyframes: dict                 # frame_id -> Keyframe
    cameras: dict                   # camera_id -> CameraModel
    landmarks: list = field(default_factory=list)
    rig: object = None
    provenance: dict = field(default_factory=dict)   # frame_id -> new | prior
    fixed_frames: set = field(default_factory=set)

    def camera_of(self, frame_id):
        return self.cameras[self.keyframes[frame_id].camera_id]

    def pose_of(self, frame_id) -> Pose:
        return self.keyframes[frame_id].cam_from_world


@dataclass
class StageConfig:
    outlier_px: float
    loss: RobustLoss = TRIVIAL_LOSS


@dataclass
class MappingConfig:
    stage1: StageConfig = field(
        default_factory=lambda: StageConfig(4.0, RobustLoss("huber", 2.0)))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(2.0))
    lambda_c: float = 1.0
    lambda_a: float = 1.0
    extrinsic_prior_weight: float = 1.0
    max_outer_iters: int = 10
    min_triangulation_angle: float = np.radians(0.5)
    triangulation: str = "dlt"      # dlt | midpoint
    seed: int = 42
    max_solver_iters: int = 50

    def __post_init__(self):
        if self.stage2.outlier_px > self.stage1.outlier_px:
            raise ValueError("stage 2 threshold must not exceed stage 1")
        if min(self.lambda_c, self.lambda_a) < 0:
            raise ValueError("weights must be non-negative")


# --- track building ---------------------------------------------------------

def build_tracks(pair_matches, features_by_frame):
    """Connected components of the feature-match graph, split on conflicts.

    `pair_matches` maps (frame_a, frame_b) -> match list.  Match edges are
    merged union-find style in sorted order; a merge that would put two
    features of the same frame into one track is skipped, which splits the
    track at the conflicting join and keeps both fragments.
    """
    parent = {}
    frames_of = {}

    def find(node):
        root = node
        while parent.setdefault(root, root) != root:
            root = parent[root]
        while parent[node] != root:       # path compression
            parent[node], node = root, parent[node]
        return root

    for (fa, fb), matches in sorted(pair_matches.items()):
        for m in sorted(matches, key=lambda m: (m.index_a, m.index_b)):
            na, nb = (fa, m.index_a), (fb, m.index_b)
            ra, rb = find(na), find(nb)
            if ra == rb:
                continue
            fset_a = frames_of.setdefault(ra, {ra[0]})
            fset_b = frames_of.setdefault(rb, {rb[0]})
            if fset_a & fset_b:
                continue  # conflicting join: keep both fragments
            if rb < ra:
                ra, rb, fset_a, fset_b = rb, ra, fset_b, fset_a
            parent[rb] = ra
            fset_a |= fset_b
            frames_of.pop(rb, None)

    components = {}
    for node in parent:
        components.setdefault(find(node), []).append(node)

    tracks = []
    for root in sorted(components):
        component = sorted(components[root])
        if len(component) >= 2:
            obs = [Observation(f, i,
                               (features_by_frame[f].keypoints[i].x,
                                features_by_frame[f].keypoints[i].y))
                   for f, i in component]
            tracks.append(Track(obs))
    return tracks


# --- triangulation ----------------------------------------------------------

def _world_rays(observations, poses, cameras):
    """Camera centers and unit world-frame ray directions per observation."""
    centers, dirs = [], []
    for o in observations:
        pose = poses[o.frame_id]
        d_cam = unproject(cameras[o.frame_id], o.pixel)
        centers.append(pose.inverse().t)
        dirs.append(pose.R.T @ d_cam)
    return np.array(centers), np.array(dirs)


def _max_ray_angle(dirs):
    best = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            c = np.clip(abs(dirs[i] @ dirs[j]), -1.0, 1.0)
            best = max(best, np.arccos(c))
    return best


def _check_cheirality(point, observations, poses, cameras):
    for o in observations:
        d_cam = unproject(cameras[o.frame_id], o.pixel)
        p_cam = poses[o.frame_id].apply(point)
        if p_cam @ d_cam <= 0:
            raise CheiralityViolation(f"point behind camera {o.frame_id}")


def triangulate_dlt(observations, poses, cameras,
                    min_angle=np.radians(0.5)):
    """Homogeneous linear triangulation from unit rays (model-agnostic).

    Each observation contributes hat(ray) [R | t] rows; the point is the
    smallest right singular vector.  Requires enough parallax and positive
    depth along every ray.
    """
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    _, dirs = _world_rays(observations, poses, cameras)
    if _max_ray_angle(dirs) < min_angle:
        raise InsufficientParallax(
            f"max triangulation angle below {np.degrees(min_angle):.3f} deg")
    rows = []
    for o in observations:
        pose = poses[o.frame_id]
        d = unproject(cameras[o.frame_id], o.pixel)
        P = np.hstack([pose.R, pose.t.reshape(3, 1)])
        rows.append(hat(d) @ P)
    A = np.vstack(rows)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise InsufficientParallax("point at infinity")
    X = Xh[:3] / Xh[3]
    _check_cheirality(X, observations, poses, cameras)
    return X


def triangulate_midpoint(observations, poses, cameras):
    """Point minimizing summed squared distance to all back-projected rays."""
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    centers, dirs = _world_rays(observations, poses, cameras)
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c, w in zip(centers, dirs):
        M = np.eye(3) - np.outer(w, w)
        A += M
        b += M @ c
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] / max(sv[-1], 1e-300) > 1e10:
        raise ParallelRays(f"ray system condition {sv[0] / max(sv[-1], 1e-300):.2e}")
    X = np.linalg.solve(A, b)
    _check_cheirality(X, observations, poses, cameras)
    return X


def reprojection_error(map_or_poses, cameras, observation, point):
    """Pixel reprojection error of one observation (helper shared by RANSAC
    scoring and outlier removal)."""
    pose = map_or_poses[observation.frame_id]
    cam = cameras[observation.frame_id]
    try:
        pix = project(cam, pose, point)
    except Exception:
        return np.inf
    return float(np.linalg.norm(pix - observation.pixel))


def ransac_triangulate(track, poses, cameras, threshold_px=4.0,
                       min_angle=np.radians(0.5), method="dlt", seed=42):
    """Pairwise-hypothesis RANSAC over a track's observations.

    All observation pairs are tried (tracks are short), scored by inlier
    count then total error; the winner is refined on its inliers.  On
    success the track is marked triangulated and a Landmark returned;
    otherwise the track is marked failed and None returned.
    """
    obs = track.observations
    best = None
    for i in range(len(obs)):
        for j in range(i + 1, len(obs)):
            pair = [obs[i], obs[j]]
            try:
                if method == "dlt":
                    X = triangulate_dlt(pair, poses, cameras,
                                        min_angle=min_angle)
                else:
                    _, dirs = _world_rays(pair, poses, cameras)
                    if _max_ray_angle(dirs) < min_angle:
                        continue
                    X = triangulate_midpoint(pair, poses, cameras)
            except Exception:
                continue
            errs = np.array([reprojection_error(poses, cameras, o, X)
                             for o in obs])
            mask = errs < threshold_px
            score = (int(mask.sum()), -float(errs[mask].sum()))
            if mask.sum() >= 2 and (best is None or score > best[0]):
                best = (score, mask, X)
    if best is None:
        track.status = FAILED
        return None
    _, mask, X = best
    inlier_obs = [o for o, ok in zip(obs, mask) if ok]
    try:
        if method == "dlt":
            X = triangulate_dlt(inlier_obs, poses, cameras, min_angle=min_angle)
        else:
            X = triangulate_midpoint(inlier_obs, poses, cameras)
    except Exception:
        track.status = FAILED
        return None
    errs = np.array([reprojection_error(poses, cameras, o, X) for o in obs])
    mask = errs < threshold_px
    if mask.sum() < 2:
        track.status = FAILED
        return None
    track.status = TRIANGULATED
    return Landmark(X, track, mask)


# --- bundle adjustment residuals -------------------------------------------

def reprojection_residual_fn(cam, pixel):
    """Global-shutter reprojection residual over (pose, point)."""
    pixel = np.asarray(pixel, dtype=float)

    def fn(pose, X):
        pix, J_pose, J_point = project_with_pose_jacobian(cam, pose, X)
        return pix - pixel, [J_pose, J_point]

    return fn


def rig_reprojection_residual_fn(cam, pixel):
    """Reprojection with cam_from_world = extrinsic @ vehicle_from_world.

    Parameters: (vehicle pose, extrinsic, point).
    """
    pixel = np.asarray(pixel, dtype=float)

    def fn(T_v, E, X):
        pose = E @ T_v
        pix, J_pose, J_point = project_with_pose_jacobian(cam, pose, X)
        return pix - pixel, [J_pose @ adjoint(E), J_pose, J_point]

    return fn


def _interp_weights(T_a, T_b, alpha):
    """Interpolated pose and the 6x6 chain matrices (I-B, B) mapping
    endpoint perturbations into the interpolated pose's tangent."""
    xi = log_map(T_a.inverse() @ T_b)
    T = T_a @ exp_map(alpha * xi)
    B = alpha * adjoint(T) @ se3_right_jacobian(alpha * xi) @ \
        se3_left_jacobian_inv(xi) @ adjoint(T_a.inverse())
    return T, np.eye(6) - B, B


def rolling_shutter_residual_fn(cam, pixel, alpha):
    """Reprojection through the pose interpolated at scanline fraction alpha
    between a frame pose and its temporal successor."""
    pixel = np.asarray(pixel, dtype=float)

    def fn(T_a, T_b, X):
        T, Wa, Wb = _interp_weights(T_a, T_b, alpha)
        pix, J_pose, J_point = project_with_pose_jacobian(cam, T, X)
        return pix - pixel, [J_pose @ Wa, J_pose @ Wb, J_point]

    return fn


def absolute_prior_residual_fn(T_init, weight):
    """sqrt(weight) * log(T T_init^-1): soft anchor to the entering pose."""
    w = np.sqrt(weight)
    T_init_inv = T_init.inverse()

    def fn(T):
        r = log_map(T @ T_init_inv)
        return w * r, [w * se3_left_jacobian_inv(r)]

    return fn


# --- bundle adjustment ------------------------------------------------------

PURE = "pure"
LOCALIZATION_FIXED = "localization_fixed"
LOCALIZATION_ADJUST = "localization_adjust"
RIG_EXTRINSIC = "rig_extrinsic"


def _shutter_alpha(kf, next_kf, pixel_row, height):
    """Scanline interpolation fraction between kf and its successor."""
    if next_kf is None or kf.shutter != ROLLING_SHUTTER:
        return None
    s = pixel_row / max(height - 1, 1)
    dt = next_kf.timestamp - kf.timestamp
    if dt <= 0:
        return None
    return float(np.clip(s * kf.exposure / dt, 0.0, 1.0))


def bundle_adjust(sparse_map: SparseMap, config: MappingConfig = None,
                  stage: int = 1, mode: str = PURE):
    """One bundle-adjustment solve over the map's poses and landmarks.

    Stage 1 uses the robust loss, stage 2 the plain quadratic.  The cost
    stacks reprojection terms, relative-pose consistency terms between
    consecutive keyframes (weight lambda_c, measured from the poses at
    entry) and absolute pose priors (weight lambda_a).
    """
    if config is None:
        config = MappingConfig()
    loss = config.stage1.loss if stage == 1 else config.stage2.loss
    frames = sorted(sparse_map.keyframes)
    fixed = set(sparse_map.fixed_frames)
    if mode == LOCALIZATION_FIXED:
        fixed |= {f for f in frames if sparse_map.provenance.get(f) == "prior"}
    rig_mode = mode == RIG_EXTRINSIC
    # rig mode pins its own gauge (first vehicle instant + reference camera)
    if not rig_mode and not fixed and config.lambda_a <= 0:
        raise NoGauge("no fixed pose and no absolute prior")

    problem = Problem()
    entry_poses = {f: sparse_map.keyframes[f].cam_from_world for f in frames}

    if rig_mode:
        if sparse_map.rig is None:
            raise NoGauge("rig_extrinsic mode needs a rig calibration")
        rig = sparse_map.rig
        # vehicle pose per rig instant, derived through each frame's extrinsic
        instants = sorted({sparse_map.keyframes[f].timestamp for f in frames})
        instant_id = {t: i for i, t in enumerate(instants)}
        vehicle_entry = {}
        for f in frames:
            kf = sparse_map.keyframes[f]
            i = instant_id[kf.timestamp]
            if i not in vehicle_entry:
                vehicle_entry[i] = rig.extrinsic(kf.camera_id).inverse() @ \
                    kf.cam_from_world
        for i in sorted(vehicle_entry):
            problem.add_parameter_block(f"v{i}", vehicle_entry[i],
                                        manifold="se3", fixed=(i == 0))
        for cid in rig.camera_ids:
            problem.add_parameter_block(
                f"e{cid}", rig.extrinsic(cid), manifold="se3",
                fixed=(cid == rig.reference_id))
            if cid != rig.reference_id and config.extrinsic_prior_weight > 0:
                problem.add_residual_block(
                    absolute_prior_residual_fn(rig.extrinsic(cid),
                                               config.extrinsic_prior_weight),
                    [f"e{cid}"])
    else:
        for f in frames:
            problem.add_parameter_block(f"p{f}", entry_poses[f],
                                        manifold="se3", fixed=f in fixed)

    for li, lm in enumerate(sparse_map.landmarks):
        if lm.track.status != TRIANGULATED:
            continue
        problem.add_parameter_block(f"l{li}", lm.position)

    # reprojection terms
    next_of = _next_same_camera(sparse_map)
    for li, lm in enumerate(sparse_map.landmarks):
        if lm.track.status != TRIANGULATED:
            continue
        for o in lm.inlier_observations():
            kf = sparse_map.keyframes[o.frame_id]
            cam = sparse_map.cameras[kf.camera_id]
            if rig_mode:
                i = instant_id[kf.timestamp]
                problem.add_residual_block(
                    rig_reprojection_residual_fn(cam, o.pixel),
                    [f"v{i}", f"e{kf.camera_id}", f"l{li}"], loss=loss)
                continue
            alpha = _shutter_alpha(kf, next_of.get(o.frame_id), o.pixel[1],
                                   cam.height)
            if alpha is None:
                problem.add_residual_block(
                    reprojection_residual_fn(cam, o.pixel),
                    [f"p{o.frame_id}", f"l{li}"], loss=loss)
            else:
                nxt = next_of[o.frame_id]
                problem.add_residual_block(
                    rolling_shutter_residual_fn(cam, o.pixel, alpha),
                    [f"p{o.frame_id}", f"p{nxt.frame_id}", f"l{li}"],
                    loss=loss)

    # relative consistency terms (lambda_c) between consecutive keyframes
    if config.lambda_c > 0:
        if rig_mode:
            ids = sorted(vehicle_entry)
            for a, b in zip(ids, ids[1:]):
                meas = vehicle_entry[a] @ vehicle_entry[b].inverse()
                edge = PoseEdge("sequential", a, b, meas,
                                config.lambda_c * np.eye(6))
                problem.add_residual_block(_edge_residual_fn(edge),
                                           [f"v{a}", f"v{b}"])
        else:
            by_cam = {}
            for f in frames:
                by_cam.setdefault(sparse_map.keyframes[f].camera_id,
                                  []).append(f)
            for seq in by_cam.values():
                for a, b in zip(seq, seq[1:]):
                    meas = entry_poses[a] @ entry_poses[b].inverse()
                    edge = PoseEdge("sequential", a, b, meas,
                                    config.lambda_c * np.eye(6))
                    problem.add_residual_block(_edge_residual_fn(edge),
                                               [f"p{a}", f"p{b}"])

    # absolute priors (lambda_a)
    if config.lambda_a > 0 and not rig_mode:
        for f in frames:
            if f in fixed:
                continue
            if mode == PURE and sparse_map.provenance.get(f) == "prior":
                continue
            problem.add_residual_block(
                absolute_prior_residual_fn(entry_poses[f], config.lambda_a),
                [f"p{f}"])

    report = solve(problem, SolverOptions(max_iters=config.max_solver_iters))

    # write results back
    if rig_mode:
        new_extr = {cid: problem.value(f"e{cid}") for cid in rig.camera_ids}
        sparse_map.rig = type(rig)(rig.camera_ids, new_extr)
        for f in frames:
            kf = sparse_map.keyframes[f]
            i = instant_id[kf.timestamp]
            kf.cam_from_world = new_extr[kf.camera_id] @ problem.value(f"v{i}")
    else:
        for f in frames:
            sparse_map.keyframes[f].cam_from_world = problem.value(f"p{f}")
    for li, lm in enumerate(sparse_map.landmarks):
        if lm.track.status == TRIANGULATED:
            lm.position = problem.value(f"l{li}")
    return report


def _next_same_camera(sparse_map):
    """frame_id -> next keyframe of the same camera (rolling-shutter partner)."""
    by_cam = {}
    for f in sorted(sparse_map.keyframes):
        kf = sparse_map.keyframes[f]
        by_cam.setdefault(kf.camera_id, []).append(kf)
    nxt = {}
    for seq in by_cam.values():
        seq.sort(key=lambda k: k.timestamp)
        for a, b in zip(seq, seq[1:]):
            nxt[a.frame_id] = b
    return nxt


def remove_outliers(sparse_map: SparseMap, threshold_px: float):
    """Drop observations above the reprojection threshold; landmarks left
    with fewer than two inliers revert to pending tracks."""
    poses = {f: kf.cam_from_world for f, kf in sparse_map.keyframes.items()}
    cams = {f: sparse_map.camera_of(f) for f in sparse_map.keyframes}
    removed = 0
    surviving = []
    for lm in sparse_map.landmarks:
        if lm.track.status != TRIANGULATED:
            surviving.append(lm)
            continue
        for k, o in enumerate(lm.track.observations):
            if not lm.inlier_mask[k]:
                continue
            if reprojection_error(poses, cams, o, lm.position) > threshold_px:
                lm.inlier_mask[k] = False
                removed += 1
        if int(lm.inlier_mask.sum()) < 2:
            lm.track.status = PENDING
        else:
            surviving.append(lm)
    sparse_map.landmarks = surviving
    return sparse_map, removed


def iterative_map(keyframes, tracks, cameras, config: MappingConfig = None,
                  rig=None, mode: str = PURE, provenance=None,
                  fixed_frames=None) -> SparseMap:
    """Alternate triangulation, bundle adjustment and outlier removal.

    Runs stage-1 rounds until a round neither adds landmarks nor removes
    observations (or the round cap is hit), then a final stage-2 pass with
    the tight threshold and plain loss.
    """
    if config is None:
        config = MappingConfig()
    kf_map = {kf.frame_id: kf for kf in keyframes}
    sparse_map = SparseMap(kf_map, dict(cameras), [], rig,
                           dict(provenance or {}), set(fixed_frames or ()))
    has_prior = any(sparse_map.provenance.get(f) == "prior" for f in kf_map)
    # prior frames are hard-fixed in bundle_adjust for localization_fixed,
    # so they already pin the gauge; anchoring a new frame there would
    # freeze its (possibly bad) initial pose
    needs_anchor = not (mode == LOCALIZATION_FIXED and has_prior)
    if not sparse_map.fixed_frames and kf_map and needs_anchor:
        anchor = min(f for f in kf_map
                     if sparse_map.provenance.get(f) != "prior") \
            if any(sparse_map.provenance.get(f) != "prior" for f in kf_map) \
            else min(kf_map)
        sparse_map.fixed_frames = {anchor}

    stats = []
    for round_idx in range(config.max_outer_iters):
        poses = {f: kf.cam_from_world for f, kf in kf_map.items()}
        cams = {f: sparse_map.camera_of(f) for f in kf_map}
        added = 0
        for track in tracks:
            if track.status != PENDING:
                continue
            lm = ransac_triangulate(
                track, poses, cams, threshold_px=config.stage1.outlier_px,
                min_angle=config.min_triangulation_angle,
                method=config.triangulation, seed=config.seed)
            if lm is not None:
                sparse_map.landmarks.append(lm)
                added += 1
        if sparse_map.landmarks:
            bundle_adjust(sparse_map, config, stage=1, mode=mode)
        _, removed = remove_outliers(sparse_map, config.stage1.outlier_px)
        stats.append({"round": round_idx, "added": added, "removed": removed,
                      "landmarks": len(sparse_map.landmarks)})
        # failed tracks stay failed; pending ones retry next round
        if added == 0 and removed == 0:
            break
    if sparse_map.landmarks:
        bundle_adjust(sparse_map, config, stage=2, mode=mode)
        _, removed = remove_outliers(sparse_map, config.stage2.outlier_px)
        stats.append({"round": "final", "added": 0, "removed": removed,
                      "landmarks": len(sparse_map.landmarks)})
    sparse_map.round_stats = stats
    return sparse_map


def mean_reprojection_error(sparse_map: SparseMap) -> float:
    poses = {f: kf.cam_from_world for f, kf in sparse_map.keyframes.items()}
    cams = {f: sparse_map.camera_of(f) for f in sparse_map.keyframes}
    errs = []
    for lm in sparse_map.landmarks:
        if lm.track.status != TRIANGULATED:
            continue
        for o in lm.inlier_observations():
            errs.append(reprojection_error(poses, cams, o, lm.position))
    return float(np.mean(errs)) if errs else 0.0

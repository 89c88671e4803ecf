"""Synthetic scene generation: ground-truth trajectories, landmark clouds,
noisy initial poses, and feature/match files the pipeline can consume
unmodified.  Every observation carries its generating landmark id, so tests
can check estimates against exact labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraModel, RigCalibration, project
from .features import FeatureSet, Keypoint, Match
from .keyframes import Keyframe
from .se3 import Pose, exp_map

SHAPES = ("line", "circle", "figure-eight")

_DEFAULT_CAMERA = CameraModel("pinhole", 500.0, 500.0, 320.0, 240.0,
                              640, 480)

# systematic per-step drift direction: heading bias plus forward scale error,
# the dominant error mode of odometry-style initializers
_DRIFT_DIRECTION = np.array([0.0, 0.0, 0.5, 1.0, 0.0, 0.0])


@dataclass
class SceneSpec:
    shape: str = "circle"
    n_frames: int = 60               # trajectory samples (rig instants)
    length: float = 40.0             # approximate path length in meters
    n_landmarks: int = 300
    pixel_sigma: float = 0.0
    drift_per_step: float = 0.0
    outlier_fraction: float = 0.0
    descriptor_dim: int = 16
    descriptor_sigma: float = 0.05
    match_window: int = 3            # sequential pairs per camera
    min_depth: float = 1.0
    max_depth: float = 40.0
    camera: CameraModel = field(default_factory=lambda: _DEFAULT_CAMERA)
    rig: RigCalibration = None       # None -> single camera 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    landmarks: np.ndarray            # (N, 3) world points
    gt_keyframes: list               # ground-truth cam_from_world
    init_keyframes: list             # drifted initial cam_from_world
    features: dict                   # frame_id -> FeatureSet
    matches: dict                    # (a, b) -> [Match]
    outlier_labels: dict             # (a, b) -> sorted corrupted match idxs
    observations: dict               # frame_id -> [(landmark_id, pixel)]

    def camera_of(self, frame_id):
        if self.spec.rig is None:
            return self.spec.camera
        return self.spec.camera      # one intrinsic model shared per rig

    def cameras(self):
        if self.spec.rig is None:
            return {0: self.spec.camera}
        return {cid: self.spec.camera for cid in self.spec.rig.camera_ids}


def _trajectory_positions(shape, n, length):
    s = np.arange(n) / n
    if shape == "line":
        xyz = np.column_stack([length * s, np.zeros(n), np.zeros(n)])
    elif shape == "circle":
        r = length / (2 * np.pi)
        th = 2 * np.pi * s
        xyz = np.column_stack([r * np.cos(th), r * np.sin(th), np.zeros(n)])
    else:  # figure-eight (Gerono lemniscate)
        a = length / 6.0
        th = 2 * np.pi * s
        xyz = np.column_stack([a * np.sin(th),
                               a * np.sin(th) * np.cos(th), np.zeros(n)])
    return xyz


def _heading_pose(position, forward):
    """world_from_cam with +z along `forward` (planar) and +y pointing down."""
    f = forward / np.linalg.norm(forward)
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, f)
    right /= np.linalg.norm(right)
    R_wc = np.column_stack([right, down, f])
    return Pose.from_rt(R_wc, np.asarray(position, dtype=float))


def ground_truth_trajectory(spec: SceneSpec):
    """Per-instant world-from-rig poses along the requested shape."""
    pos = _trajectory_positions(spec.shape, spec.n_frames, spec.length)
    nxt = np.roll(pos, -1, axis=0)
    if spec.shape == "line":
        nxt[-1] = pos[-1] + (pos[-1] - pos[-2])
    return [_heading_pose(p, q - p) for p, q in zip(pos, nxt)]


def _scatter_landmarks(spec, trajectory, rng):
    """Landmarks in a band around the path, biased ahead of the cameras."""
    centers = np.array([t.t for t in trajectory])
    lo = centers.min(axis=0) - np.array([8.0, 8.0, 0.0])
    hi = centers.max(axis=0) + np.array([8.0, 8.0, 4.0])
    lo[2] = -2.0
    return rng.uniform(lo, hi, (spec.n_landmarks, 3))


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    world_from_rig = ground_truth_trajectory(spec)
    landmarks = _scatter_landmarks(spec, world_from_rig, rng)

    rig = spec.rig
    cam_ids = (0,) if rig is None else tuple(rig.camera_ids)
    extr = {0: Pose.identity()} if rig is None else \
        {cid: rig.extrinsic(cid) for cid in cam_ids}
    cam = spec.camera

    # ground-truth and drifted keyframes (drift applied to the rig pose)
    gt_keyframes, init_keyframes = [], []
    drift_step = exp_map(spec.drift_per_step * _DRIFT_DIRECTION)
    drifted_rfw = None
    fid = 0
    for i, wfr in enumerate(world_from_rig):
        rig_from_world = wfr.inverse()
        if i == 0:
            drifted_rfw = rig_from_world
        else:
            rel = rig_from_world @ world_from_rig[i - 1]  # inter-instant motion
            drifted_rfw = drift_step @ rel @ drifted_rfw
        for cid in cam_ids:
            gt_keyframes.append(
                Keyframe(fid, 0.1 * i, cid, extr[cid] @ rig_from_world))
            init_keyframes.append(
                Keyframe(fid, 0.1 * i, cid, extr[cid] @ drifted_rfw))
            fid += 1

    # descriptor prototypes keyed to landmark identity
    proto = np.random.default_rng(seed + 1).normal(
        size=(spec.n_landmarks, spec.descriptor_dim))
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)

    features, observations = {}, {}
    for kf in gt_keyframes:
        kps, descs, obs = [], [], []
        for lid, p in enumerate(landmarks):
            p_cam = kf.cam_from_world.apply(p)
            if not (spec.min_depth < p_cam[2] < spec.max_depth):
                continue
            try:
                pix = project(cam, kf.cam_from_world, p)
            except Exception:
                continue
            if not (0 <= pix[0] < cam.width and 0 <= pix[1] < cam.height):
                continue
            noisy = pix + rng.normal(0, spec.pixel_sigma, 2) \
                if spec.pixel_sigma else pix
            d = proto[lid] + rng.normal(0, spec.descriptor_sigma,
                                        spec.descriptor_dim)
            kps.append(Keypoint(float(noisy[0]), float(noisy[1])))
            descs.append(d / np.linalg.norm(d))
            obs.append((lid, pix.copy()))
        features[kf.frame_id] = FeatureSet(
            kf.frame_id, kps,
            np.array(descs).reshape(len(kps), spec.descriptor_dim))
        observations[kf.frame_id] = obs

    pairs = default_pairs(spec, gt_keyframes)
    matches, labels = matches_for_pairs(
        SyntheticScene(spec, seed, landmarks, gt_keyframes, init_keyframes,
                       features, {}, {}, observations),
        pairs, rng)
    return SyntheticScene(spec, seed, landmarks, gt_keyframes,
                          init_keyframes, features, matches, labels,
                          observations)


def default_pairs(spec: SceneSpec, keyframes):
    """Sequential pairs per camera within the match window, plus intra-rig
    pairs at each instant."""
    by_cam = {}
    for kf in keyframes:
        by_cam.setdefault(kf.camera_id, []).append(kf)
    pairs = []
    for seq in by_cam.values():
        seq.sort(key=lambda k: k.timestamp)
        for i, a in enumerate(seq):
            for b in seq[i + 1:i + 1 + spec.match_window]:
                pairs.append((a.frame_id, b.frame_id))
    by_time = {}
    for kf in keyframes:
        by_time.setdefault(kf.timestamp, []).append(kf.frame_id)
    for fids in by_time.values():
        fids.sort()
        for i in range(len(fids)):
            for j in range(i + 1, len(fids)):
                pairs.append((fids[i], fids[j]))
    return sorted(set(pairs))


def matches_for_pairs(scene: SyntheticScene, pairs, rng=None):
    """Ground-truth association matches for the requested frame pairs, with
    floor(outlier_fraction * n) corrupted (and labeled) per pair."""
    if rng is None:
        rng = np.random.default_rng(scene.seed + 2)
    spec = scene.spec
    matches, labels = {}, {}
    for a, b in pairs:
        index_a = {lid: i for i, (lid, _) in enumerate(scene.observations[a])}
        ms = []
        for ib, (lid, _) in enumerate(scene.observations[b]):
            if lid in index_a:
                ms.append(Match(index_a[lid], ib, 0.0))
        n_out = int(np.floor(spec.outlier_fraction * len(ms)))
        corrupted = sorted(rng.choice(len(ms), size=n_out, replace=False)) \
            if n_out else []
        n_b = len(scene.observations[b])
        for k in corrupted:
            m = ms[k]
            wrong = (m.index_b + 1 + int(rng.integers(n_b - 1))) % n_b \
                if n_b > 1 else m.index_b
            ms[k] = Match(m.index_a, wrong, 0.0)
        matches[(a, b)] = ms
        labels[(a, b)] = list(corrupted)
    return matches, labels


def export_scene(scene: SyntheticScene, out_dir):
    """Write manifest, per-frame features, matches and both trajectories."""
    import os

    from .io import (DatasetManifest, trajectory_from_keyframes,
                     write_features, write_manifest, write_matches,
                     write_tum)
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(scene.cameras(), scene.init_keyframes,
                               scene.spec.rig)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for fid in sorted(scene.features):
        write_features(scene.features[fid],
                       os.path.join(feat_dir, f"frame{fid:06d}.feat"))
    write_matches(scene.matches, os.path.join(out_dir, "matches.bin"))
    write_tum(trajectory_from_keyframes(scene.gt_keyframes),
              os.path.join(out_dir, "groundtruth.tum"))
    write_tum(trajectory_from_keyframes(scene.init_keyframes),
              os.path.join(out_dir, "initial.tum"))

"""Command-line pipeline driver.

Subcommands cover the full pipeline from synthetic data generation through
mapping, localization, extrinsic refinement, export and ATE evaluation.
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
Diagnostics go to stderr; machine-readable results go to files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import errors
from .config import read_config
from .errors import ParseError, SfmError
from .evaluation import evaluate_ate
from .features import ExtractorConfig, extract_features, match_features
from .io import (DatasetManifest, read_features, read_manifest, read_map,
                 read_matches, read_tum, read_vocab,
                 trajectory_from_keyframes, write_colmap_sparse,
                 write_features, write_manifest, write_map, write_matches,
                 write_tum, write_vocab)
from .keyframes import Keyframe
from .mapping import MappingConfig, StageConfig, bundle_adjust, build_tracks, iterative_map
from .posegraph import build_pose_graph, optimize_pose_graph
from .relpose import RelPoseParams, two_view_geometry
from .retrieval import KeyframeDatabase, LoopParams, detect_loops
from .se3 import Pose
from .solver import RobustLoss
from .synth import SceneSpec, export_scene, generate_scene
from .viewgraph import ViewGraph, pairs_by_radius, pairs_from_pose_graph
from .vocabulary import build_kmeans_tree

_DATA_ERRORS = (ParseError, errors.InvariantViolation, errors.BadMagic,
                errors.ChecksumMismatch, errors.VersionUnsupported,
                errors.UnsupportedCameraKind, errors.MissingCalibration,
                errors.DuplicateFrame, FileNotFoundError, NotADirectoryError,
                IsADirectoryError)
_NUMERICAL_ERRORS = (errors.SolverDiverged, errors.SingularSystem,
                     errors.NoConsensus, errors.InsufficientMatches,
                     errors.DegenerateMotion, errors.IllConditioned,
                     errors.NegativeScale, errors.NoFixedNode,
                     errors.NoGauge, errors.NoOverlap,
                     errors.InsufficientParallax, errors.ParallelRays,
                     errors.CheiralityViolation)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(msg):
    print(msg, file=sys.stderr)


# --- shared helpers ---------------------------------------------------------

def _features_path(feat_dir, frame_id):
    return os.path.join(feat_dir, f"frame{frame_id:06d}.feat")


def _load_all_features(manifest, feat_dir):
    out = {}
    for kf in manifest.keyframes:
        path = _features_path(feat_dir, kf.frame_id)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing feature file {path}")
        out[kf.frame_id] = read_features(path)
    return out


def _mapping_config(cfg):
    stage1 = StageConfig(cfg.get("stage1_outlier_px", 4.0),
                         RobustLoss("huber", cfg.get("huber_delta", 2.0)))
    stage2 = StageConfig(cfg.get("stage2_outlier_px", 2.0))
    return MappingConfig(
        stage1=stage1, stage2=stage2,
        lambda_c=cfg.get("lambda_c", 1.0),
        lambda_a=cfg.get("lambda_a", 1.0),
        max_outer_iters=cfg.get("max_outer_iters", 10),
        min_triangulation_angle=np.radians(
            cfg.get("min_triangulation_angle_deg", 0.5)),
        triangulation=cfg.get("triangulation", "dlt"),
        seed=cfg.get("seed", 42),
        max_solver_iters=cfg.get("max_solver_iters", 50))


def _pose_json(pose: Pose):
    return {"quat": [float(v) for v in pose.quat],
            "t": [float(v) for v in pose.t]}


def _pose_from_obj(obj):
    return Pose(np.asarray(obj["quat"], dtype=float),
                np.asarray(obj["t"], dtype=float))


def _read_loops(path):
    with open(path) as f:
        data = json.load(f)
    return [(l["from"], l["to"], _pose_from_obj(l["pose"]), l["inliers"])
            for l in data["loops"]]


def _write_trajectory(keyframes, path):
    write_tum(trajectory_from_keyframes(keyframes), path)


def _read_pgm(path):
    """Minimal binary (P5) / ASCII (P2) 8-bit PGM reader."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        # skip whitespace and comments token by token
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), \
        int(tokens[3])
    if magic not in (b"P5", b"P2") or maxval > 255:
        raise ParseError(f"unsupported PGM variant in {path}")
    if magic == b"P5":
        pixels = np.frombuffer(data[i + 1:i + 1 + w * h], dtype=np.uint8)
    else:
        pixels = np.array(data[i:].split()[:w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ParseError(f"truncated PGM {path}")
    return pixels.reshape(h, w).astype(float) / 255.0


# --- subcommands ------------------------------------------------------------

def _cmd_synth(args, cfg):
    spec = SceneSpec(shape=args.shape, n_frames=args.frames,
                     length=args.length, n_landmarks=args.landmarks,
                     pixel_sigma=args.pixel_sigma,
                     drift_per_step=args.drift,
                     outlier_fraction=args.outlier_fraction)
    scene = generate_scene(spec, seed=args.seed)
    export_scene(scene, args.out)
    _log(f"synth: wrote {len(scene.gt_keyframes)} frames, "
         f"{len(scene.matches)} match pairs to {args.out}")
    return 0


def _cmd_extract(args, cfg):
    manifest = read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    config = ExtractorConfig()
    for kf in manifest.keyframes:
        if not kf.image_path:
            raise FileNotFoundError(
                f"frame {kf.frame_id} has no image path")
        img_path = os.path.join(os.path.dirname(args.manifest),
                                kf.image_path)
        if not os.path.exists(img_path):
            raise FileNotFoundError(f"missing image {img_path}")
        image = _read_pgm(img_path)
        fs = extract_features(image, config, frame_id=kf.frame_id)
        write_features(fs, _features_path(args.out, kf.frame_id))
    _log(f"extract: {len(manifest.keyframes)} frames -> {args.out}")
    return 0


def _cmd_match(args, cfg):
    manifest = read_manifest(args.manifest)
    features = _load_all_features(manifest, args.features)
    with open(args.viewgraph) as f:
        vg = ViewGraph.from_text(f.read())
    ratio = cfg.get("ratio", 0.8)
    matches = {}
    for (a, b), _prov in vg.pairs():
        matches[(a, b)] = match_features(features[a], features[b],
                                         ratio=ratio)
    write_matches(matches, args.out)
    _log(f"match: {len(matches)} pairs -> {args.out}")
    return 0


def _cmd_build_vocab(args, cfg):
    manifest = read_manifest(args.manifest)
    features = _load_all_features(manifest, args.features)
    descs = np.vstack([features[f].descriptors for f in sorted(features)
                       if len(features[f])])
    tree = build_kmeans_tree(descs, branching=cfg.get("branching", 4),
                             depth=cfg.get("depth", 3),
                             seed=cfg.get("vocab_seed", 0))
    write_vocab(tree, args.out)
    _log(f"build-vocab: {tree.num_words} words -> {args.out}")
    return 0


def _cmd_detect_loops(args, cfg):
    manifest = read_manifest(args.manifest)
    features = _load_all_features(manifest, args.features)
    vocab = read_vocab(args.vocab)
    db = KeyframeDatabase(vocab)
    for kf in manifest.keyframes:
        db.add(kf.frame_id, features[kf.frame_id])
    params = LoopParams(
        top_n=cfg.get("top_n", 5), min_score=cfg.get("min_score", 0.05),
        min_inliers=cfg.get("min_inliers", 25),
        exclusion=cfg.get("exclusion", 30), ratio=cfg.get("ratio", 0.8))
    loops = detect_loops(db, params=params)
    kf_by_id = {kf.frame_id: kf for kf in manifest.keyframes}
    out = []
    for lc in loops:
        q, m = lc.query_frame, lc.map_frame
        cam_q = manifest.cameras[kf_by_id[q].camera_id]
        cam_m = manifest.cameras[kf_by_id[m].camera_id]
        try:
            tv = two_view_geometry(features[m], features[q], cam_m, cam_q,
                                   RelPoseParams(ratio=params.ratio))
        except SfmError as e:
            _log(f"detect-loops: skipping ({q},{m}): {e}")
            continue
        # metric scale for the unit direction comes from the current poses
        rel_init = kf_by_id[q].cam_from_world @ \
            kf_by_id[m].cam_from_world.inverse()
        scale = float(np.linalg.norm(rel_init.t))
        meas = Pose.from_rt(tv.rotation, scale * tv.translation_direction)
        out.append({"from": int(q), "to": int(m),
                    "inliers": int(lc.inlier_count),
                    "score": float(lc.bow_score),
                    "pose": _pose_json(meas)})
    with open(args.out, "w") as f:
        json.dump({"loops": out}, f, indent=2, sort_keys=True)
        f.write("\n")
    _log(f"detect-loops: {len(out)} loops -> {args.out}")
    return 0


def _cmd_build_viewgraph(args, cfg):
    manifest = read_manifest(args.manifest)
    if args.mode == "radius":
        poses = {kf.frame_id: kf.cam_from_world.inverse()
                 for kf in manifest.keyframes}
        vg = pairs_by_radius(poses, max_dist=cfg.get("max_dist", 20.0),
                             max_angle=np.radians(
                                 cfg.get("max_angle_deg", 90.0)))
    else:
        loops = _read_loops(args.loops) if args.loops else ()
        graph = build_pose_graph(manifest.keyframes, loop_closures=loops,
                                 rig=manifest.rig)
        vg = pairs_from_pose_graph(graph)
    with open(args.out, "w") as f:
        f.write(vg.to_text())
    _log(f"build-viewgraph ({args.mode}): {len(vg)} pairs -> {args.out}")
    return 0


def _cmd_optimize_posegraph(args, cfg):
    manifest = read_manifest(args.manifest)
    loops = _read_loops(args.loops) if args.loops else ()
    graph = build_pose_graph(manifest.keyframes, loop_closures=loops,
                             rig=manifest.rig, node_kind=args.node_kind)
    report = optimize_pose_graph(graph)
    kfs = list(manifest.keyframes)
    if args.node_kind == "camera_frame":
        for kf in kfs:
            kf.cam_from_world = graph.nodes[graph.frame_to_node[
                kf.frame_id]].pose
    else:
        for kf in kfs:
            node = graph.nodes[graph.frame_to_node[kf.frame_id]]
            extr = manifest.rig.extrinsic(kf.camera_id) if manifest.rig \
                else Pose.identity()
            kf.cam_from_world = extr @ node.pose
    _write_trajectory(kfs, args.out)
    if args.manifest_out:
        write_manifest(DatasetManifest(manifest.cameras, kfs, manifest.rig),
                       args.manifest_out)
    _log(f"optimize-posegraph: cost {report.initial_cost:.6g} -> "
         f"{report.final_cost:.6g} in {report.iterations} iters")
    return 0


def _cmd_map(args, cfg):
    manifest = read_manifest(args.manifest)
    features = _load_all_features(manifest, args.features)
    matches = read_matches(args.matches)
    tracks = build_tracks(matches, features)
    smap = iterative_map(manifest.keyframes, tracks, manifest.cameras,
                         config=_mapping_config(cfg), rig=manifest.rig)
    write_map(smap, args.out)
    if args.traj:
        _write_trajectory([smap.keyframes[f] for f in
                           sorted(smap.keyframes)], args.traj)
    n_tri = sum(1 for lm in smap.landmarks)
    _log(f"map: {n_tri}/{len(tracks)} tracks triangulated -> {args.out}")
    return 0


def _cmd_localize(args, cfg):
    prior = read_map(args.map)
    manifest = read_manifest(args.manifest)
    features = _load_all_features(manifest, args.features)
    matches = read_matches(args.matches)
    tracks = build_tracks(matches, features)
    keyframes = [prior.keyframes[f] for f in sorted(prior.keyframes)] + \
        [kf for kf in manifest.keyframes if kf.frame_id not in prior.keyframes]
    provenance = {f: "prior" for f in prior.keyframes}
    provenance.update({kf.frame_id: "new" for kf in manifest.keyframes
                       if kf.frame_id not in prior.keyframes})
    cameras = dict(prior.cameras)
    cameras.update(manifest.cameras)
    mode = "localization_fixed" if args.fixed else "localization_adjust"
    smap = iterative_map(keyframes, tracks, cameras,
                         config=_mapping_config(cfg), rig=prior.rig,
                         mode=mode, provenance=provenance)
    write_map(smap, args.out)
    if args.traj:
        _write_trajectory([smap.keyframes[f] for f in sorted(smap.keyframes)
                           if smap.provenance.get(f) == "new"], args.traj)
    _log(f"localize ({mode}): {len(provenance)} frames -> {args.out}")
    return 0


def _cmd_refine_extrinsics(args, cfg):
    smap = read_map(args.map)
    if smap.rig is None:
        raise errors.MissingCalibration("map has no rig calibration")
    report = bundle_adjust(smap, _mapping_config(cfg), stage=2,
                           mode="rig_extrinsic")
    write_map(smap, args.out)
    if args.rig_out:
        obj = {str(int(c)): _pose_json(smap.rig.extrinsic(c))
               for c in smap.rig.camera_ids}
        with open(args.rig_out, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
    _log(f"refine-extrinsics: cost {report.initial_cost:.6g} -> "
         f"{report.final_cost:.6g}")
    return 0


def _cmd_export(args, cfg):
    smap = read_map(args.map)
    if args.format == "colmap":
        write_colmap_sparse(smap, args.out)
    else:
        _write_trajectory([smap.keyframes[f] for f in
                           sorted(smap.keyframes)], args.out)
    _log(f"export ({args.format}): -> {args.out}")
    return 0


def _cmd_evaluate(args, cfg):
    est = read_tum(args.estimate)
    ref = read_tum(args.reference)
    report = evaluate_ate(est, ref, align=args.align)
    with open(args.out, "w") as f:
        json.dump(report.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    _log(f"evaluate: rmse {report.rmse:.6g} m over {report.n_pairs} poses")
    return 0


# --- argument wiring --------------------------------------------------------

def _build_parser():
    p = _Parser(prog="sfmkit", description=__doc__)
    p.add_argument("--config", help="key=value overrides file")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--shape", default="circle",
                   choices=("line", "circle", "figure-eight"))
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--length", type=float, default=40.0)
    s.add_argument("--landmarks", type=int, default=300)
    s.add_argument("--pixel-sigma", type=float, default=0.0)
    s.add_argument("--drift", type=float, default=0.0)
    s.add_argument("--outlier-fraction", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_synth)

    s = sub.add_parser("extract", help="extract features from images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_extract)

    s = sub.add_parser("match", help="match features over view-graph pairs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--viewgraph", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_match)

    s = sub.add_parser("build-vocab", help="train a vocabulary tree")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_build_vocab)

    s = sub.add_parser("detect-loops", help="loop-closure retrieval")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_detect_loops)

    s = sub.add_parser("build-viewgraph", help="select image pairs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", default="graph", choices=("graph", "radius"))
    s.add_argument("--loops", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_build_viewgraph)

    s = sub.add_parser("optimize-posegraph", help="global pose refinement")
    s.add_argument("--manifest", required=True)
    s.add_argument("--loops", default=None)
    s.add_argument("--node-kind", default="camera_frame",
                   choices=("camera_frame", "vehicle_rig"))
    s.add_argument("--out", required=True, help="optimized TUM trajectory")
    s.add_argument("--manifest-out", default=None)
    s.set_defaults(fn=_cmd_optimize_posegraph)

    s = sub.add_parser("map", help="triangulate and bundle adjust")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--matches", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--traj", default=None)
    s.set_defaults(fn=_cmd_map)

    s = sub.add_parser("localize", help="register frames against a map")
    s.add_argument("--map", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--matches", required=True)
    s.add_argument("--fixed", action="store_true",
                   help="keep prior keyframes frozen")
    s.add_argument("--out", required=True)
    s.add_argument("--traj", default=None)
    s.set_defaults(fn=_cmd_localize)

    s = sub.add_parser("refine-extrinsics", help="rig extrinsic refinement")
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rig-out", default=None)
    s.set_defaults(fn=_cmd_refine_extrinsics)

    s = sub.add_parser("export", help="export a map")
    s.add_argument("--map", required=True)
    s.add_argument("--format", default="colmap", choices=("colmap", "tum"))
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_export)

    s = sub.add_parser("evaluate", help="absolute trajectory error")
    s.add_argument("--estimate", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--align", default="se3", choices=("se3", "none"))
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_evaluate)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    cfg = {}
    try:
        if args.config:
            cfg = read_config(args.config)
        return args.fn(args, cfg)
    except _DATA_ERRORS as e:
        _log(f"data error: {e}")
        return 2
    except _NUMERICAL_ERRORS as e:
        _log(f"numerical failure: {e}")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())

"""Persistent formats: dataset manifests (JSON), TUM trajectories, COLMAP
sparse text export, and checksummed binary artifacts for features, matches,
vocabularies and maps.

Trajectory-style files store world-from-camera poses; everything internal is
camera-from-world, so the conversion happens here and nowhere else.  All
writers are deterministic: the same value produces a byte-identical file.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cameras import (CameraModel, EQUIDISTANT_FISHEYE, PINHOLE,
                      PINHOLE_RADIAL, RigCalibration)
from .errors import (BadMagic, ChecksumMismatch, InvariantViolation,
                     ParseError, UnsupportedCameraKind, VersionUnsupported)
from .features import FeatureSet, Keypoint, Match
from .keyframes import GLOBAL_SHUTTER, Keyframe, ROLLING_SHUTTER
from .mapping import Landmark, Observation, SparseMap, Track
from .se3 import Pose
from .vocabulary import TreeNode, VocabularyTree

FORMAT_VERSION = 1


# --- dataset manifest -------------------------------------------------------

@dataclass
class DatasetManifest:
    cameras: dict                    # camera_id -> CameraModel
    keyframes: list                  # Keyframe (cam_from_world poses)
    rig: RigCalibration = None

    def validate(self):
        seen = set()
        for kf in self.keyframes:
            if kf.frame_id in seen:
                raise InvariantViolation(f"duplicate frame_id {kf.frame_id}")
            seen.add(kf.frame_id)
            if kf.camera_id not in self.cameras:
                raise InvariantViolation(
                    f"frame {kf.frame_id} references unknown camera "
                    f"{kf.camera_id}")
        last = {}
        for kf in self.keyframes:
            if kf.timestamp < last.get(kf.camera_id, -np.inf):
                raise InvariantViolation(
                    f"timestamps decrease for camera {kf.camera_id} "
                    f"at frame {kf.frame_id}")
            last[kf.camera_id] = kf.timestamp
        return self


def _require_keys(obj, required, optional, where):
    if not isinstance(obj, dict):
        raise ParseError(f"expected object at {where}", field=where)
    for k in obj:
        if k not in required and k not in optional:
            raise ParseError("unknown field", field=f"{where}.{k}")
    for k in required:
        if k not in obj:
            raise ParseError("missing field", field=f"{where}.{k}")


def _pose_to_json(pose: Pose):
    return {"quat": [float(v) for v in pose.quat],
            "t": [float(v) for v in pose.t]}


def _pose_from_json(obj, where):
    _require_keys(obj, ("quat", "t"), (), where)
    quat, t = obj["quat"], obj["t"]
    if len(quat) != 4 or len(t) != 3:
        raise ParseError("pose needs quat[4] and t[3]", field=where)
    return Pose(np.asarray(quat, dtype=float), np.asarray(t, dtype=float))


def _camera_to_json(cid, cam: CameraModel):
    return {"id": int(cid), "kind": cam.kind, "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "distortion": list(cam.distortion)}


def _camera_from_json(obj, where):
    _require_keys(obj, ("id", "kind", "fx", "fy", "cx", "cy",
                        "width", "height"), ("distortion",), where)
    try:
        cam = CameraModel(obj["kind"], float(obj["fx"]), float(obj["fy"]),
                          float(obj["cx"]), float(obj["cy"]),
                          int(obj["width"]), int(obj["height"]),
                          tuple(obj.get("distortion", ())))
    except ValueError as e:
        raise ParseError(str(e), field=where)
    return int(obj["id"]), cam


def manifest_to_json(manifest: DatasetManifest) -> dict:
    frames = []
    for kf in manifest.keyframes:
        shutter = ("global" if kf.shutter == GLOBAL_SHUTTER
                   else {"rolling": kf.exposure})
        frames.append({
            "frame_id": int(kf.frame_id),
            "timestamp": float(kf.timestamp),
            "camera_id": int(kf.camera_id),
            "image": kf.image_path,
            "world_from_cam": _pose_to_json(kf.cam_from_world.inverse()),
            "shutter": shutter,
        })
    out = {"cameras": [_camera_to_json(cid, manifest.cameras[cid])
                       for cid in sorted(manifest.cameras)],
           "keyframes": frames}
    if manifest.rig is not None:
        out["rig"] = {
            "camera_ids": [int(c) for c in manifest.rig.camera_ids],
            "cam_from_rig": {str(int(c)): _pose_to_json(manifest.rig.extrinsic(c))
                             for c in manifest.rig.camera_ids},
        }
    return out


def manifest_from_json(obj) -> DatasetManifest:
    _require_keys(obj, ("cameras", "keyframes"), ("rig",), "manifest")
    cameras = {}
    for i, c in enumerate(obj["cameras"]):
        cid, cam = _camera_from_json(c, f"cameras[{i}]")
        if cid in cameras:
            raise InvariantViolation(f"duplicate camera id {cid}")
        cameras[cid] = cam
    keyframes = []
    for i, f in enumerate(obj["keyframes"]):
        where = f"keyframes[{i}]"
        _require_keys(f, ("frame_id", "timestamp", "camera_id",
                          "world_from_cam"), ("image", "shutter"), where)
        shutter = f.get("shutter", "global")
        if shutter == "global":
            kind, exposure = GLOBAL_SHUTTER, 0.0
        elif isinstance(shutter, dict) and set(shutter) == {"rolling"}:
            kind, exposure = ROLLING_SHUTTER, float(shutter["rolling"])
        else:
            raise ParseError("bad shutter spec", field=f"{where}.shutter")
        wfc = _pose_from_json(f["world_from_cam"], f"{where}.world_from_cam")
        try:
            kf = Keyframe(int(f["frame_id"]), float(f["timestamp"]),
                          int(f["camera_id"]), wfc.inverse(),
                          image_path=f.get("image", ""),
                          shutter=kind, exposure=exposure)
        except ValueError as e:
            raise ParseError(str(e), field=where)
        keyframes.append(kf)
    rig = None
    if "rig" in obj:
        _require_keys(obj["rig"], ("camera_ids", "cam_from_rig"), (), "rig")
        ids = [int(c) for c in obj["rig"]["camera_ids"]]
        extr = {c: _pose_from_json(obj["rig"]["cam_from_rig"][str(c)],
                                   f"rig.cam_from_rig.{c}")
                for c in ids}
        try:
            rig = RigCalibration(tuple(ids), extr)
        except (KeyError, ValueError) as e:
            raise InvariantViolation(f"bad rig calibration: {e}")
    return DatasetManifest(cameras, keyframes, rig).validate()


def write_manifest(manifest: DatasetManifest, path):
    manifest.validate()
    text = json.dumps(manifest_to_json(manifest), indent=2, sort_keys=True)
    with open(path, "w") as f:
        f.write(text + "\n")


def read_manifest(path) -> DatasetManifest:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line=e.lineno)
    return manifest_from_json(obj)


# --- TUM trajectories -------------------------------------------------------

@dataclass
class TrajectoryRecord:
    """One world-from-camera pose sample; quaternion stored (w, x, y, z)."""
    timestamp: float
    t: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.quat = np.asarray(self.quat, dtype=float).reshape(4)


def trajectory_from_keyframes(keyframes) -> list:
    records = []
    for kf in keyframes:
        wfc = kf.cam_from_world.inverse()
        records.append(TrajectoryRecord(kf.timestamp, wfc.t, wfc.quat))
    return records


def write_tum(records, path):
    lines = []
    for r in sorted(records, key=lambda r: r.timestamp):
        w, x, y, z = r.quat
        vals = [r.t[0], r.t[1], r.t[2], x, y, z, w]
        lines.append(f"{r.timestamp:.9f} " +
                     " ".join(f"{v:.9g}" for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> list:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}",
                                 line=lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError("non-numeric field", line=lineno)
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            norm = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
            if abs(norm - 1.0) > 1e-6:
                raise InvariantViolation(
                    f"non-unit quaternion (norm {norm:.8f}) at line {lineno}")
            records.append(TrajectoryRecord(ts, (tx, ty, tz),
                                            (qw, qx, qy, qz)))
    return records


# --- COLMAP sparse text export ---------------------------------------------

_COLMAP_MODELS = {
    PINHOLE: "PINHOLE",
    PINHOLE_RADIAL: "OPENCV",
    EQUIDISTANT_FISHEYE: "OPENCV_FISHEYE",
}


def _colmap_params(cam: CameraModel):
    base = [cam.fx, cam.fy, cam.cx, cam.cy]
    if cam.kind == PINHOLE:
        return base
    if cam.kind == PINHOLE_RADIAL:
        k1, k2 = cam.distortion
        return base + [k1, k2, 0.0, 0.0]
    if cam.kind == EQUIDISTANT_FISHEYE:
        return base + [0.0, 0.0, 0.0, 0.0]
    raise UnsupportedCameraKind(cam.kind)


def _fmt(v):
    return f"{v:.9g}"


def write_colmap_sparse(sparse_map: SparseMap, out_dir):
    """COLMAP text triplet (cameras/images/points3D) with two-way
    observation cross-references."""
    os.makedirs(out_dir, exist_ok=True)
    for cam in sparse_map.cameras.values():
        if cam.kind not in _COLMAP_MODELS:
            raise UnsupportedCameraKind(cam.kind)

    # assign 1-based point ids to triangulated landmarks, gather per image
    point_ids = {}
    for li, lm in enumerate(sparse_map.landmarks):
        if lm.track.status == "triangulated":
            point_ids[li] = len(point_ids) + 1
    image_obs = {f: [] for f in sparse_map.keyframes}   # (x, y, point_id, li)
    for li, pid in point_ids.items():
        lm = sparse_map.landmarks[li]
        for o in lm.inlier_observations():
            image_obs[o.frame_id].append((o.pixel[0], o.pixel[1], pid, li))
    track_refs = {li: [] for li in point_ids}           # (image_id, p2d_idx)
    for f in sorted(image_obs):
        for idx, (_, _, _, li) in enumerate(image_obs[f]):
            track_refs[li].append((f, idx))

    poses = {f: kf.cam_from_world
             for f, kf in sparse_map.keyframes.items()}

    with open(os.path.join(out_dir, "cameras.txt"), "w") as f:
        f.write("# Camera list with one line of data per camera:\n"
                "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cid in sorted(sparse_map.cameras):
            cam = sparse_map.cameras[cid]
            params = " ".join(_fmt(p) for p in _colmap_params(cam))
            f.write(f"{cid} {_COLMAP_MODELS[cam.kind]} {cam.width} "
                    f"{cam.height} {params}\n")

    with open(os.path.join(out_dir, "images.txt"), "w") as f:
        f.write("# Image list with two lines of data per image:\n"
                "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
                "#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for fid in sorted(sparse_map.keyframes):
            kf = sparse_map.keyframes[fid]
            p = poses[fid]
            w, x, y, z = p.quat
            name = kf.image_path or f"frame{fid:06d}.png"
            f.write(f"{fid} {_fmt(w)} {_fmt(x)} {_fmt(y)} {_fmt(z)} "
                    f"{_fmt(p.t[0])} {_fmt(p.t[1])} {_fmt(p.t[2])} "
                    f"{kf.camera_id} {name}\n")
            f.write(" ".join(f"{_fmt(ox)} {_fmt(oy)} {pid}"
                             for ox, oy, pid, _ in image_obs[fid]) + "\n")

    from .cameras import project
    with open(os.path.join(out_dir, "points3D.txt"), "w") as f:
        f.write("# 3D point list with one line of data per point:\n"
                "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, "
                "TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for li in sorted(point_ids, key=lambda k: point_ids[k]):
            lm = sparse_map.landmarks[li]
            errs = []
            for o in lm.inlier_observations():
                pix = project(sparse_map.camera_of(o.frame_id),
                              poses[o.frame_id], lm.position)
                errs.append(np.linalg.norm(pix - o.pixel))
            err = float(np.mean(errs)) if errs else 0.0
            track = " ".join(f"{img} {idx}" for img, idx in track_refs[li])
            X, Y, Z = lm.position
            f.write(f"{point_ids[li]} {_fmt(X)} {_fmt(Y)} {_fmt(Z)} "
                    f"128 128 128 {_fmt(err)} {track}\n")


# --- checksummed binary container ------------------------------------------

_MAGIC_FEATURES = b"SFMFEAT\0"
_MAGIC_MATCHES = b"SFMMATCH"
_MAGIC_VOCAB = b"SFMVOCAB"
_MAGIC_MAP = b"SFMMAP\0\0"


def _write_container(path, magic, sections):
    """magic(8) version(u32) count(u32) [name(16) length(u64)]* payloads crc32"""
    header = magic + struct.pack("<II", FORMAT_VERSION, len(sections))
    table = b""
    payload = b""
    for name, blob in sections:
        nb = name.encode("ascii")
        if len(nb) > 16:
            raise ValueError(f"section name too long: {name}")
        table += nb.ljust(16, b"\0") + struct.pack("<Q", len(blob))
        payload += blob
    body = header + table + payload
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def _read_container(path, magic):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 20:
        raise ChecksumMismatch("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("stored checksum does not match contents")
    if body[:8] != magic:
        raise BadMagic(f"expected {magic!r}, found {body[:8]!r}")
    version, count = struct.unpack("<II", body[8:16])
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"version {version}, supported "
                                 f"{FORMAT_VERSION}")
    sections = {}
    offset = 16 + 24 * count
    pos = 16
    for _ in range(count):
        name = body[pos:pos + 16].rstrip(b"\0").decode("ascii")
        (length,) = struct.unpack("<Q", body[pos + 16:pos + 24])
        sections[name] = body[offset:offset + length]
        offset += length
        pos += 24
    if offset != len(body):
        raise ChecksumMismatch("section table does not cover the payload")
    return sections


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# --- features ---------------------------------------------------------------

def write_features(features: FeatureSet, path):
    xy = features.xy.astype("<f8")
    resp = np.array([k.response for k in features.keypoints], dtype="<f8")
    desc = np.ascontiguousarray(features.descriptors, dtype="<f8")
    dim = desc.shape[1] if desc.size else 0
    meta = struct.pack("<qII", features.frame_id, len(features), dim)
    _write_container(path, _MAGIC_FEATURES, [
        ("meta", meta), ("xy", xy.tobytes()),
        ("response", resp.tobytes()), ("descriptors", desc.tobytes())])


def read_features(path) -> FeatureSet:
    s = _read_container(path, _MAGIC_FEATURES)
    frame_id, n, dim = struct.unpack("<qII", s["meta"])
    xy = np.frombuffer(s["xy"], dtype="<f8").reshape(n, 2)
    resp = np.frombuffer(s["response"], dtype="<f8")
    desc = np.frombuffer(s["descriptors"], dtype="<f8").reshape(n, dim)
    kps = [Keypoint(float(x), float(y), float(r))
           for (x, y), r in zip(xy, resp)]
    return FeatureSet(frame_id, kps, desc.copy())


# --- matches ----------------------------------------------------------------

def write_matches(pair_matches: dict, path):
    """`pair_matches`: (frame_a, frame_b) -> list of Match."""
    pair_blob = b""
    data_blob = b""
    for (fa, fb) in sorted(pair_matches):
        ms = pair_matches[(fa, fb)]
        pair_blob += struct.pack("<qqI", fa, fb, len(ms))
        for m in ms:
            data_blob += struct.pack("<IId", m.index_a, m.index_b, m.distance)
    meta = struct.pack("<I", len(pair_matches))
    _write_container(path, _MAGIC_MATCHES, [
        ("meta", meta), ("pairs", pair_blob), ("data", data_blob)])


def read_matches(path) -> dict:
    s = _read_container(path, _MAGIC_MATCHES)
    (n_pairs,) = struct.unpack("<I", s["meta"])
    out = {}
    ppos = dpos = 0
    for _ in range(n_pairs):
        fa, fb, count = struct.unpack_from("<qqI", s["pairs"], ppos)
        ppos += 20
        ms = []
        for _ in range(count):
            ia, ib, d = struct.unpack_from("<IId", s["data"], dpos)
            dpos += 16
            ms.append(Match(ia, ib, d))
        out[(fa, fb)] = ms
    return out


# --- vocabulary -------------------------------------------------------------

def _tree_node_to_json(node: TreeNode):
    return {"centroid": [float(v) for v in node.centroid],
            "word_id": node.word_id,
            "children": [_tree_node_to_json(c) for c in node.children]}


def _tree_node_from_json(obj):
    return TreeNode(np.asarray(obj["centroid"], dtype=float),
                    [_tree_node_from_json(c) for c in obj["children"]],
                    obj["word_id"])


def write_vocab(tree: VocabularyTree, path):
    obj = {"branching": tree.branching, "depth": tree.depth, "dim": tree.dim,
           "idf": [float(v) for v in tree.idf],
           "root": _tree_node_to_json(tree.root)}
    _write_container(path, _MAGIC_VOCAB, [("tree", _json_bytes(obj))])


def read_vocab(path) -> VocabularyTree:
    obj = json.loads(_read_container(path, _MAGIC_VOCAB)["tree"])
    root = _tree_node_from_json(obj["root"])
    words = {}

    def collect(node):
        if node.is_leaf:
            words[node.word_id] = node
        for c in node.children:
            collect(c)

    collect(root)
    word_list = [words[w] for w in sorted(words)]
    return VocabularyTree(obj["branching"], obj["depth"], obj["dim"], root,
                          word_list, np.asarray(obj["idf"], dtype=float))


# --- sparse map -------------------------------------------------------------

def _keyframe_to_json(kf: Keyframe):
    return {"frame_id": int(kf.frame_id), "timestamp": float(kf.timestamp),
            "camera_id": int(kf.camera_id),
            "cam_from_world": _pose_to_json(kf.cam_from_world),
            "image": kf.image_path, "shutter": kf.shutter,
            "exposure": float(kf.exposure)}


def _keyframe_from_json(obj):
    return Keyframe(obj["frame_id"], obj["timestamp"], obj["camera_id"],
                    _pose_from_json(obj["cam_from_world"], "keyframe"),
                    image_path=obj["image"], shutter=obj["shutter"],
                    exposure=obj["exposure"])


def write_map(sparse_map: SparseMap, path):
    landmarks = []
    for lm in sparse_map.landmarks:
        landmarks.append({
            "position": [float(v) for v in lm.position],
            "status": lm.track.status,
            "observations": [{"frame_id": int(o.frame_id),
                              "feature_index": int(o.feature_index),
                              "pixel": [float(o.pixel[0]), float(o.pixel[1])]}
                             for o in lm.track.observations],
            "inliers": [bool(b) for b in lm.inlier_mask],
        })
    obj = {
        "cameras": [_camera_to_json(cid, sparse_map.cameras[cid])
                    for cid in sorted(sparse_map.cameras)],
        "keyframes": [_keyframe_to_json(sparse_map.keyframes[f])
                      for f in sorted(sparse_map.keyframes)],
        "landmarks": landmarks,
        "provenance": {str(int(f)): sparse_map.provenance[f]
                       for f in sorted(sparse_map.provenance)},
        "fixed_frames": sorted(int(f) for f in sparse_map.fixed_frames),
        "rig": None,
    }
    if sparse_map.rig is not None:
        obj["rig"] = {
            "camera_ids": [int(c) for c in sparse_map.rig.camera_ids],
            "cam_from_rig": {str(int(c)):
                             _pose_to_json(sparse_map.rig.extrinsic(c))
                             for c in sparse_map.rig.camera_ids}}
    _write_container(path, _MAGIC_MAP, [("map", _json_bytes(obj))])


def read_map(path) -> SparseMap:
    obj = json.loads(_read_container(path, _MAGIC_MAP)["map"])
    cameras = dict(_camera_from_json(c, "cameras") for c in obj["cameras"])
    keyframes = {kf.frame_id: kf
                 for kf in (_keyframe_from_json(k) for k in obj["keyframes"])}
    rig = None
    if obj["rig"] is not None:
        ids = [int(c) for c in obj["rig"]["camera_ids"]]
        rig = RigCalibration(tuple(ids), {
            c: _pose_from_json(obj["rig"]["cam_from_rig"][str(c)], "rig")
            for c in ids})
    landmarks = []
    for l in obj["landmarks"]:
        obs = [Observation(o["frame_id"], o["feature_index"], o["pixel"])
               for o in l["observations"]]
        track = Track(obs, status=l["status"])
        landmarks.append(Landmark(np.asarray(l["position"]), track,
                                  np.asarray(l["inliers"], dtype=bool)))
    return SparseMap(keyframes, cameras, landmarks, rig,
                     {int(f): p for f, p in obj["provenance"].items()},
                     set(obj["fixed_frames"]))

import json
import os

import numpy as np
import pytest

from sfmkit.cli import main

import filecmp


def _run(*argv):
    return main(list(argv))


def test_unknown_subcommand_usage(capsys):
    assert _run("frobnicate") == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_required_argument():
    assert _run("map") == 1


def _synth(out, frames=12, drift=0.01, seed=3, landmarks=120):
    assert _run("synth", "--shape", "circle", "--frames", str(frames),
                "--landmarks", str(landmarks), "--drift", str(drift),
                "--seed", str(seed), "--out", str(out)) == 0


def test_map_missing_features_exits_2(tmp_path, capsys):
    _synth(tmp_path)
    code = _run("map", "--manifest", str(tmp_path / "manifest.json"),
                "--features", str(tmp_path / "nope"),
                "--matches", str(tmp_path / "matches.bin"),
                "--out", str(tmp_path / "map.bin"))
    assert code == 2
    assert "nope" in capsys.readouterr().err


def test_full_pipeline_improves_ate(tmp_path):
    _synth(tmp_path, frames=12, drift=0.01)
    man = str(tmp_path / "manifest.json")
    feats = str(tmp_path / "features")
    vg = str(tmp_path / "viewgraph.txt")
    matches = str(tmp_path / "matches2.bin")
    mp = str(tmp_path / "map.bin")
    traj = str(tmp_path / "estimate.tum")

    assert _run("build-viewgraph", "--manifest", man, "--mode", "graph",
                "--out", vg) == 0
    assert _run("match", "--manifest", man, "--features", feats,
                "--viewgraph", vg, "--out", matches) == 0
    assert _run("map", "--manifest", man, "--features", feats,
                "--matches", matches, "--out", mp, "--traj", traj) == 0

    rep_est = str(tmp_path / "ate_est.json")
    rep_init = str(tmp_path / "ate_init.json")
    assert _run("evaluate", "--estimate", traj,
                "--reference", str(tmp_path / "groundtruth.tum"),
                "--out", rep_est) == 0
    assert _run("evaluate", "--estimate", str(tmp_path / "initial.tum"),
                "--reference", str(tmp_path / "groundtruth.tum"),
                "--out", rep_init) == 0
    est = json.load(open(rep_est))
    init = json.load(open(rep_init))
    assert est["rmse"] < init["rmse"]

    # export both formats from the same map
    assert _run("export", "--map", mp, "--format", "tum",
                "--out", str(tmp_path / "export.tum")) == 0
    assert _run("export", "--map", mp, "--format", "colmap",
                "--out", str(tmp_path / "colmap")) == 0
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        assert (tmp_path / "colmap" / name).exists()


def test_vocab_and_loop_detection(tmp_path):
    assert _run("synth", "--shape", "circle", "--frames", "40",
                "--landmarks", "250", "--length", "30",
                "--seed", "2", "--out", str(tmp_path)) == 0
    man = str(tmp_path / "manifest.json")
    feats = str(tmp_path / "features")
    vocab = str(tmp_path / "vocab.bin")
    loops = str(tmp_path / "loops.json")
    cfgfile = tmp_path / "cfg"
    cfgfile.write_text("exclusion=8\nmin_inliers=10\nmin_score=0.01\n")

    assert _run("build-vocab", "--manifest", man, "--features", feats,
                "--out", vocab) == 0
    assert _run("--config", str(cfgfile), "detect-loops", "--manifest", man,
                "--features", feats, "--vocab", vocab, "--out", loops) == 0
    data = json.load(open(loops))
    assert "loops" in data
    for l in data["loops"]:
        assert abs(l["from"] - l["to"]) > 8
        assert l["inliers"] >= 10

    # optimized trajectory comes out whether or not loops were found
    traj = str(tmp_path / "pgo.tum")
    assert _run("optimize-posegraph", "--manifest", man, "--loops", loops,
                "--out", traj) == 0
    assert os.path.exists(traj)


def test_evaluate_no_overlap_exits_3(tmp_path, capsys):
    a = tmp_path / "a.tum"
    b = tmp_path / "b.tum"
    a.write_text("0.000000000 0 0 0 0 0 0 1\n")
    b.write_text("5.000000000 0 0 0 0 0 0 1\n")
    assert _run("evaluate", "--estimate", str(a), "--reference", str(b),
                "--out", str(tmp_path / "r.json")) == 3


def test_refine_extrinsics_without_rig_exits_2(tmp_path):
    _synth(tmp_path)
    man = str(tmp_path / "manifest.json")
    vg = str(tmp_path / "vg.txt")
    matches = str(tmp_path / "m.bin")
    mp = str(tmp_path / "map.bin")
    assert _run("build-viewgraph", "--manifest", man, "--out", vg) == 0
    assert _run("match", "--manifest", man,
                "--features", str(tmp_path / "features"),
                "--viewgraph", vg, "--out", matches) == 0
    assert _run("map", "--manifest", man,
                "--features", str(tmp_path / "features"),
                "--matches", matches, "--out", mp) == 0
    assert _run("refine-extrinsics", "--map", mp,
                "--out", str(tmp_path / "m2.bin")) == 2


def test_extract_from_pgm(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.uniform(0, 255, (48, 64))).astype(np.uint8)
    (tmp_path / "img0.pgm").write_bytes(
        b"P5\n# synthetic\n64 48\n255\n" + img.tobytes())
    manifest = {
        "cameras": [{"id": 0, "kind": "pinhole", "fx": 50.0, "fy": 50.0,
                     "cx": 32.0, "cy": 24.0, "width": 64, "height": 48,
                     "distortion": []}],
        "keyframes": [{"frame_id": 0, "timestamp": 0.0, "camera_id": 0,
                       "image": "img0.pgm",
                       "world_from_cam": {"quat": [1, 0, 0, 0],
                                          "t": [0, 0, 0]},
                       "shutter": "global"}],
    }
    man = tmp_path / "manifest.json"
    man.write_text(json.dumps(manifest))
    out = tmp_path / "features"
    assert _run("extract", "--manifest", str(man), "--out", str(out)) == 0
    from sfmkit.io import read_features
    fs = read_features(out / "frame000000.feat")
    assert len(fs) > 0


def test_extract_missing_image_exits_2(tmp_path, capsys):
    _synth(tmp_path, frames=3)
    code = _run("extract", "--manifest", str(tmp_path / "manifest.json"),
                "--out", str(tmp_path / "f2"))
    assert code == 2


def test_synth_deterministic_outputs(tmp_path):
    _synth(tmp_path / "a", seed=5)
    _synth(tmp_path / "b", seed=5)
    for rel in ("manifest.json", "matches.bin", "groundtruth.tum",
                "initial.tum", os.path.join("features", "frame000000.feat")):
        assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel,
                           shallow=False), rel

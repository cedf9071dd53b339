import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image
from scipy import signal

from fusioncal.cli import main
from fusioncal.cloudmap import PointCloud, load_intensity_image
from fusioncal.geometry import RigidTransform, compose, invert, rotation_angle_deg
from fusioncal.pointio import read_cloud, write_cloud

IR_K = {"fx": 260.0, "fy": 260.0, "cx": 160.0, "cy": 128.0, "width": 320, "height": 256}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# --- general -----------------------------------------------------------------

def test_module_entry_point_version():
    res = subprocess.run([sys.executable, "-m", "fusioncal", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("fusioncal ")


def test_unknown_command_is_usage_error(capsys):
    code, _, err = run(capsys, "nonsense")
    assert code == 2 and err.startswith("ERROR 2 ")


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "render", "--config", tmp_path / "none.yaml")
    assert code == 2
    assert err.strip().startswith("ERROR 2 cli --config: config file not found")


def test_bad_override_syntax(capsys, rig_copy):
    code, _, err = run(capsys, "render", "--config", rig_copy / "config.yaml", "--set", "nokeyvalue")
    assert code == 2 and "--set" in err


# --- accumulate --------------------------------------------------------------

def test_accumulate_single_scan_passes_through(capsys, tmp_path, rng):
    scans = tmp_path / "scans"
    scans.mkdir()
    cloud = PointCloud(rng.uniform(-3, 3, (500, 3)), rng.uniform(0, 1, 500))
    write_cloud(cloud, scans / "000.ply")
    out = tmp_path / "map.ply"
    code, _, _ = run(capsys, "accumulate", "--scans", scans, "--output", out, "--set", "accumulate.voxel_size=0")
    assert code == 0
    merged = read_cloud(out)
    assert np.allclose(merged.points, cloud.points, atol=1e-6)
    rows = read_csv(tmp_path / "map.poses.csv")
    assert rows[0] == ["index", "file", "x", "y", "z", "qx", "qy", "qz", "qw"]
    assert [float(v) for v in rows[1][2:]] == [0, 0, 0, 0, 0, 0, 1]


def test_accumulate_two_offset_scans(capsys, tmp_path):
    from fusioncal.synthetic import corner_cloud

    scans = tmp_path / "scans"
    scans.mkdir()
    cloud = corner_cloud(np.random.default_rng(0), 3000)
    shift = RigidTransform.from_rt(np.eye(3), np.array([0.1, -0.05, 0.02]))
    write_cloud(cloud, scans / "a.ply")
    write_cloud(cloud.transformed(invert(shift)), scans / "b.ply")
    out = tmp_path / "map.ply"
    cfg = write_config(tmp_path / "c.yaml", {"accumulate": {"voxel_size": 0.01},
                                             "icp": {"max_iterations": 100, "convergence_eps": 1e-9,
                                                     "voxel_size": 0.001}})
    assert run(capsys, "accumulate", "--config", cfg, "--scans", scans, "--output", out)[0] == 0
    second = read_csv(tmp_path / "map.poses.csv")[2]
    assert second[1] == "b.ply"
    assert np.allclose([float(v) for v in second[2:5]], shift.translation, atol=2e-3)


def test_accumulate_empty_directory(capsys, tmp_path):
    code, _, err = run(capsys, "accumulate", "--scans", tmp_path)
    assert code == 2 and "accumulate.scans" in err


# --- render ------------------------------------------------------------------

def test_render_writes_png_and_sidecar(capsys, rig_copy, tmp_path):
    digests = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "render", "--config", rig_copy / "config.yaml", "--output-dir", tmp_path / name)
        assert code == 0
        digests.append(hashlib.sha256((tmp_path / name / "rgb_intensity.png").read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    img = load_intensity_image(tmp_path / "a" / "rgb_intensity.lidx")
    assert img.point_index.shape == (480, 640) and (img.point_index >= 0).any()


def test_render_empty_view_is_data_error(capsys, rig_copy):
    code, _, err = run(capsys, "render", "--config", rig_copy / "config.yaml", "--set",
                       "cameras.rgb.initial={quaternion_xyzw: [0, 0, 0, 1], translation: [0, 0, -1000]}")
    assert code == 3
    assert err.startswith("ERROR 3 ")


# --- detect / match / lift ---------------------------------------------------

def test_detect_match_lift_chain(capsys, rig_copy, tmp_path):
    cfg = rig_copy / "config.yaml"
    kp = tmp_path / "kp.json"
    assert run(capsys, "detect", "--image", rig_copy / "rgb.png", "--output", kp)[0] == 0
    doc = json.loads(kp.read_text())
    assert doc["format"] == "fusioncal.keypoints"
    assert len(doc["keypoints"]) == len(doc["descriptors"]) > 0
    assert all(len(d) == 64 for d in doc["descriptors"])

    matches = tmp_path / "m.json"
    code, _, _ = run(capsys, "match", "--image-a", rig_copy / "rgb.png",
                     "--image-b", rig_copy / "rgb_intensity.png", "--output", matches)
    assert code == 0
    assert json.loads(matches.read_text())["format"] == "fusioncal.matches"

    corr = tmp_path / "c.csv"
    assert run(capsys, "lift", "--config", cfg, "--camera", "rgb", "--output", corr)[0] == 0
    rows = read_csv(corr)
    assert len(rows) > 20 and all(len(r) == 5 for r in rows[1:])


def test_detect_unreadable_image(capsys, tmp_path):
    bad = tmp_path / "x.png"
    bad.write_text("not an image")
    assert run(capsys, "detect", "--image", bad, "--output", tmp_path / "k.json")[0] == 2


# --- calibrate / report ------------------------------------------------------

def test_calibrate_fixture(capsys, rig_copy):
    code, _, _ = run(capsys, "calibrate", "--config", rig_copy / "config.yaml")
    assert code == 0
    out = rig_copy / "calib"
    truth = json.loads((rig_copy / "truth.json").read_text())
    for name in ("rgb_from_lidar", "ir_from_lidar", "rgb_from_ir"):
        got = RigidTransform.from_dict(json.loads((out / f"{name}.json").read_text()))
        ref = RigidTransform.from_dict(truth[name])
        err = compose(got, invert(ref))
        assert np.linalg.norm(err.translation) < 0.005 and rotation_angle_deg(err.rotation_matrix) < 0.1
    doc = json.loads((out / "rgb_from_lidar.json").read_text())
    assert set(doc["inputs"]) >= {"matches"} and doc["inlier_count"] >= 20
    assert len(json.loads((out / "rgb_from_ir.json").read_text())["homography"]) == 9
    report = json.loads((out / "report.json").read_text())
    assert all(abs(r["error"]) < 0.5 for r in report["rows"])
    assert (out / "report.md").read_text().startswith("|")


def test_calibrate_missing_match_file(capsys, rig_copy):
    (rig_copy / "ir_matches.json").unlink()
    code, _, err = run(capsys, "calibrate", "--config", rig_copy / "config.yaml")
    assert code == 2 and "cameras.ir.matches" in err


def test_report_reference_rows(capsys, tmp_path):
    est = tmp_path / "est.json"
    est.write_text(json.dumps({"euler": {"x": 0.05, "y": 0.343, "z": -0.116,
                                         "roll": -0.2, "pitch": -18.11, "yaw": 0.171}}))
    out = tmp_path / "rep.json"
    code, table, _ = run(capsys, "report", "--estimate", est, "--measured", "0.07,0.36,-0.13,0,-16,0",
                         "--output", out)
    assert code == 0
    rows = {r["axis"]: r for r in json.loads(out.read_text())["rows"]}
    assert rows["x"]["error"] == pytest.approx(-2.0, abs=1e-9)
    assert rows["y"]["error"] == pytest.approx(-1.7, abs=1e-9)
    assert rows["z"]["error"] == pytest.approx(1.4, abs=1e-9)
    assert rows["pitch"]["error"] == pytest.approx(-2.11, abs=1e-9)
    assert "Final Estimate" in table


def test_report_bad_measured(capsys, tmp_path):
    est = tmp_path / "est.json"
    est.write_text(json.dumps({"matrix": np.eye(4).tolist()}))
    assert run(capsys, "report", "--estimate", est, "--measured", "1,2,3")[0] == 2


# --- warp --------------------------------------------------------------------

def test_warp_identity_homography(capsys, rig_copy):
    code, _, _ = run(capsys, "warp", "--config", rig_copy / "config.yaml",
                     "--set", "warp.homography=[1,0,0,0,1,0,0,0,1]", "--set", "warp.interpolation=nearest")
    assert code == 0
    rgb = np.asarray(Image.open(rig_copy / "rgb.png"))
    out = np.asarray(Image.open(rig_copy / "warped" / "frame0_rgbwarp.png"))
    mask = np.asarray(Image.open(rig_copy / "warped" / "frame0_mask.png"))
    assert out.shape[:2] == (256, 320)
    assert np.array_equal(out, rgb[:256, :320]) and np.all(mask == 255)


def test_warp_from_extrinsic(capsys, rig_copy):
    assert run(capsys, "calibrate", "--config", rig_copy / "config.yaml")[0] == 0
    assert run(capsys, "warp", "--config", rig_copy / "config.yaml")[0] == 0
    mask = np.asarray(Image.open(rig_copy / "warped" / "frame0_mask.png"))
    assert set(np.unique(mask)) <= {0, 255} and (mask == 255).mean() > 0.5


def test_warp_needs_homography_or_extrinsic(capsys, rig_copy):
    cfg = yaml.safe_load((rig_copy / "config.yaml").read_text())
    del cfg["warp"]["extrinsic"]
    path = write_config(rig_copy / "noext.yaml", cfg)
    code, _, err = run(capsys, "warp", "--config", path)
    assert code == 2 and err.startswith("ERROR 2 cli warp: ")


def test_warp_bad_interpolation(capsys, rig_copy):
    code, _, _ = run(capsys, "warp", "--config", rig_copy / "config.yaml", "--set", "warp.interpolation=cubic")
    assert code == 2


# --- label -------------------------------------------------------------------

TILT = math.radians(45.0)


def base_from_camera():
    z_c = np.array([math.cos(TILT), 0.0, -math.sin(TILT)])
    x_c = np.array([0.0, -1.0, 0.0])
    m = np.eye(4)
    m[:3, :3] = np.column_stack([x_c, np.cross(z_c, x_c), z_c])
    m[:3, 3] = [0.0, 0.0, 1.0]
    return m


def label_setup(tmp_path, acc, traj_times=None):
    fs = 100.0
    ts = np.arange(len(acc)) / fs
    with open(tmp_path / "imu.csv", "w") as f:
        f.write("timestamp,acc_z,vx,vy\n")
        for t, a in zip(ts, acc):
            f.write(f"{float(t)!r},{float(a)!r},1.0,0.0\n")
    traj_times = np.arange(0.0, 10.01, 0.1) if traj_times is None else traj_times
    with open(tmp_path / "traj.csv", "w") as f:
        f.write("timestamp,x,y,z,qx,qy,qz,qw\n")
        for t in traj_times:
            f.write(f"{float(t)!r},{float(t)!r},0,0,0,0,0,1\n")
    cfg = {"cameras": {"ir": {"intrinsics": IR_K}},
           "label": {"imu": "imu.csv", "trajectory": "traj.csv",
                     "base_from_camera": {"matrix": base_from_camera().tolist()},
                     "frames": [{"timestamp": 2.0}, {"timestamp": 5.0}],
                     "lookahead": [1.0, 2.0], "output": "labels.csv"}}
    return write_config(tmp_path / "label.yaml", cfg), ts


def expected_center(ahead):
    dx, dz = ahead, -1.0
    y_c = -math.sin(TILT) * dx - math.cos(TILT) * dz
    z_c = math.cos(TILT) * dx - math.sin(TILT) * dz
    return 160.0, 128.0 + 260.0 * y_c / z_c


def test_label_zero_acceleration(capsys, tmp_path):
    cfg, _ = label_setup(tmp_path, np.zeros(1000))
    code, _, err = run(capsys, "label", "--config", cfg)
    assert code == 0 and "WARNING" not in err
    rows = read_csv(tmp_path / "labels.csv")
    assert rows[0] == ["timestamp", "patch_u", "patch_v", "y"]
    assert [float(r[0]) for r in rows[1:]] == [3.0, 4.0, 6.0, 7.0]
    for r, ahead in zip(rows[1:], [1.0, 2.0, 1.0, 2.0]):
        assert float(r[3]) == 0.0
        assert np.allclose([float(r[1]), float(r[2])], expected_center(ahead), atol=1e-6)


def test_label_sine_matches_independent_welch(capsys, tmp_path):
    fs = 100.0
    acc = 0.5 * np.sin(2 * np.pi * 7.0 * np.arange(1000) / fs)
    cfg, ts = label_setup(tmp_path, acc)
    assert run(capsys, "label", "--config", cfg)[0] == 0
    rows = read_csv(tmp_path / "labels.csv")[1:]
    for r in rows:
        sel = np.abs(ts - float(r[0])) <= 0.5
        x = acc[sel] - acc[sel].mean()
        f, p = signal.welch(x, fs=fs, window="hann", nperseg=min(256, len(x)),
                            noverlap=min(256, len(x)) // 2, detrend=False)
        area = float(np.sum((p[1:] + p[:-1]) * np.diff(f)) / 2.0)
        assert float(r[3]) == pytest.approx(area / (1.0 + 10.0), rel=1e-9)


def test_label_trajectory_gap_flags_rows(capsys, tmp_path):
    times = np.r_[np.arange(0.0, 4.51, 0.1), np.arange(6.5, 10.01, 0.1)]
    cfg, _ = label_setup(tmp_path, np.zeros(1000), traj_times=times)
    code, _, err = run(capsys, "label", "--config", cfg)
    assert code == 0
    assert "WARNING 2 label row(s) flagged (nan)" in err
    rows = read_csv(tmp_path / "labels.csv")[1:]
    assert [r[3] for r in rows] == ["0", "0", "nan", "nan"]


# --- costmap -----------------------------------------------------------------

def costmap_config(tmp_path, rgb, ir, **extra):
    Image.fromarray(rgb).save(tmp_path / "rgb.png")
    Image.fromarray(ir).save(tmp_path / "ir.png")
    section = {"rgb": "rgb.png", "ir": "ir.png", "patch_size": 64, "stride": 64, "speed": 1.0, **extra}
    return write_config(tmp_path / "cm.yaml", {"costmap": section})


def test_costmap_constant_image_uniform(capsys, tmp_path):
    img = np.full((128, 256), 90, dtype=np.uint8)
    cfg = costmap_config(tmp_path, img, img)
    assert run(capsys, "costmap", "--config", cfg)[0] == 0
    grid = read_csv(tmp_path / "costmap" / "grid.csv")
    assert len(grid) == 2 and all(len(r) == 4 for r in grid)
    assert len({v for r in grid for v in r}) == 1
    png = np.asarray(Image.open(tmp_path / "costmap" / "costmap.png"))
    assert png.shape == (128, 256, 3) and len(np.unique(png.reshape(-1, 3), axis=0)) == 1


def test_costmap_noisy_half_costs_more(capsys, tmp_path, rng):
    img = np.full((128, 256), 90, dtype=np.uint8)
    img[:, 128:] = rng.integers(0, 256, (128, 128), dtype=np.uint8)
    cfg = costmap_config(tmp_path, img, img)
    assert run(capsys, "costmap", "--config", cfg, "--threads", 2)[0] == 0
    grid = np.array(read_csv(tmp_path / "costmap" / "grid.csv"), dtype=float)
    assert grid[:, 2:].min() > grid[:, :2].max()


def test_costmap_mask_marks_unknown(capsys, tmp_path):
    img = np.full((128, 128), 90, dtype=np.uint8)
    mask = np.full((128, 128), 255, dtype=np.uint8)
    mask[:64, :64] = 0
    Image.fromarray(mask).save(tmp_path / "mask.png")
    cfg = costmap_config(tmp_path, img, img, mask="mask.png")
    assert run(capsys, "costmap", "--config", cfg)[0] == 0
    assert read_csv(tmp_path / "costmap" / "grid.csv")[0][0] == "unknown"


def test_costmap_bad_patch_config(capsys, tmp_path):
    img = np.zeros((64, 64), dtype=np.uint8)
    cfg = costmap_config(tmp_path, img, img)
    code, _, err = run(capsys, "costmap", "--config", cfg, "--set", "costmap.patch_size=100")
    assert code == 2 and "costmap.patch_size/stride" in err


def test_costmap_size_mismatch_is_data_error(capsys, tmp_path):
    cfg = costmap_config(tmp_path, np.zeros((64, 64), np.uint8), np.zeros((64, 80), np.uint8),
                         patch_size=32, stride=32)
    assert run(capsys, "costmap", "--config", cfg)[0] == 3

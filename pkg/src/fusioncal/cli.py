"""``fusioncal`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration/usage error, 3 data/algorithm
error. Failures print ``ERROR <code> <module> <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, calib, cloudmap, correspond, costpipe, warp
from .config import PipelineConfig
from .errors import ConfigError, FusionCalError
from .geometry import EulerPose, RigidTransform, compose
from .pointio import read_cloud, write_cloud

log = logging.getLogger("fusioncal")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


def _fmt(x):
    return format(float(x), ".12g")


def read_image(path):
    try:
        return np.asarray(Image.open(path))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None


def write_png(array, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def _to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint16:
        return np.round(img / 257.0).astype(np.uint8)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _output_dir(cfg, args, section, default):
    if getattr(args, "output_dir", None):
        out = Path(args.output_dir)
    else:
        out = cfg.resolve(cfg.get(f"{section}.output_dir", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------- accumulate

def cmd_accumulate(cfg, args):
    scan_dir = args.scans or cfg.get("accumulate.scans", None)
    if scan_dir is None:
        raise ConfigError("no scan directory given", "accumulate.scans")
    scan_dir = cfg.resolve(scan_dir) if not args.scans else Path(args.scans)
    if not scan_dir.is_dir():
        raise ConfigError(f"not a directory: {scan_dir}", "accumulate.scans")
    files = sorted(p for p in scan_dir.iterdir() if p.suffix.lower() in (".ply", ".pcd"))
    if not files:
        raise ConfigError(f"no .ply/.pcd scans in {scan_dir}", "accumulate.scans")
    voxel = cfg.number("accumulate.voxel_size", 0.05, minimum=0)
    params = cfg.icp()
    scans = [read_cloud(f) for f in files]
    poses = [RigidTransform.identity()]
    for scan in scans[1:]:
        reference = cloudmap.accumulate(scans[: len(poses)], poses, voxel)
        res = cloudmap.icp_align(scan, reference, poses[-1], params)
        log.info("scan %d: rms %.4f m after %d iterations", len(poses), res.rms_error, res.iterations)
        poses.append(res.transform)
    merged = cloudmap.accumulate(scans, poses, voxel)
    out = Path(args.output) if args.output else cfg.resolve(cfg.get("accumulate.output", "map.ply"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cloud(merged, out)
    with open(out.with_suffix(".poses.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "file", "x", "y", "z", "qx", "qy", "qz", "qw"])
        for i, (p, pose) in enumerate(zip(files, poses)):
            w.writerow([i, p.name, *map(_fmt, pose.translation), *map(_fmt, pose.rotation)])
    print(f"{len(merged)} points from {len(scans)} scans -> {out}")


# ------------------------------------------------------------------- render

def cmd_render(cfg, args):
    cam = args.camera
    cloud = read_cloud(cfg.path("cloud"))
    k = cfg.intrinsics(cam)
    pose = cfg.transform(f"cameras.{cam}.initial")
    radius = int(cfg.number("render.splat_radius", 1, kind=int, minimum=0))
    img = cloudmap.render_intensity_image(cloud, k, pose, radius)
    out = _output_dir(cfg, args, "render", "render")
    png = out / f"{cam}_intensity.png"
    side = cloudmap.save_intensity_image(img, png, out / f"{cam}_intensity.lidx")
    print(f"{int((~img.holes).sum())} pixels written -> {png}, {side}")


# ----------------------------------------------------------- detect / match

def _keypoints_doc(kps, desc, shape):
    return {
        "format": "fusioncal.keypoints",
        "version": 1,
        "image": {"width": int(shape[1]), "height": int(shape[0])},
        "keypoints": [[k.u, k.v, k.response, k.orientation] for k in kps],
        "descriptors": [bytes(d).hex() for d in desc],
    }


def cmd_detect(cfg, args):
    img = _to_uint8(read_image(args.image))
    kps, desc = correspond.detect(img, args.max_keypoints, args.threshold, args.equalize)
    out = Path(args.output)
    out.write_text(json.dumps(_keypoints_doc(kps, desc, img.shape), indent=1) + "\n")
    print(f"{len(kps)} keypoints -> {out}")


def cmd_match(cfg, args):
    img_a = _to_uint8(read_image(args.image_a))
    img_b = _to_uint8(read_image(args.image_b))
    kpa, da = correspond.detect(img_a, args.max_keypoints, args.threshold, False)
    kpb, db = correspond.detect(img_b, args.max_keypoints, args.threshold, not args.no_equalize)
    matches = correspond.match(da, db, args.ratio, not args.no_cross_check)
    correspond.save_matches(args.output, kpa, kpb, matches, img_a.shape[1::-1], img_b.shape[1::-1])
    print(f"{len(matches)} matches ({len(kpa)} / {len(kpb)} keypoints) -> {args.output}")


# --------------------------------------------------------------- lift / cal

def _lift_camera(cfg, cam, cloud):
    kpa, kpb, matches, _ = correspond.load_matches(cfg.path(f"cameras.{cam}.matches"))
    side = cfg.path(f"cameras.{cam}.intensity_image")
    img = cloudmap.load_intensity_image(side)
    corrs, dropped = correspond.lift(matches, kpa, kpb, img, cloud)
    if dropped:
        log.warning("%s: %d of %d matches fell on holes", cam, dropped, len(matches))
    return corrs, dropped


def cmd_lift(cfg, args):
    cloud = read_cloud(cfg.path("cloud"))
    corrs, dropped = _lift_camera(cfg, args.camera, cloud)
    correspond.save_correspondences(args.output, corrs)
    print(f"{len(corrs)} correspondences ({dropped} dropped) -> {args.output}")


def cmd_calibrate(cfg, args):
    cloud_path = cfg.path("cloud")
    cameras = {}
    for cam in ("rgb", "ir"):
        cameras[cam] = (cfg.intrinsics(cam), cfg.path(f"cameras.{cam}.matches"),
                        cfg.path(f"cameras.{cam}.intensity_image"))
    params = cfg.ransac()
    plane = cfg.plane()
    measured = cfg.measured()
    out = _output_dir(cfg, args, "calibrate", "calib")
    cloud = read_cloud(cloud_path)

    transforms = {}
    for cam, (k, match_path, side) in cameras.items():
        corrs, dropped = _lift_camera(cfg, cam, cloud)
        pts, px = correspond.correspondence_arrays(corrs)
        res = calib.ransac_calibrate(pts, px, k, params)
        transforms[cam] = res.transform
        doc = calib.result_document(res.transform, f"{cam}_from_lidar", res,
                                    {"cloud": cloud_path, "matches": match_path, "intensity_image": side})
        doc["dropped_matches"] = dropped
        calib.write_document(doc, out / f"{cam}_from_lidar.json")
        print(f"{cam}: {res.inlier_count}/{len(corrs)} inliers, rms {res.rms_reprojection:.4f} px")

    rgb_ir = calib.compose_rgb_ir(transforms["rgb"], transforms["ir"])
    hmat = None
    if plane is not None:
        hmat = warp.homography_from_extrinsics(rgb_ir, cameras["rgb"][0], cameras["ir"][0], plane)
    calib.write_document(calib.result_document(rgb_ir, "rgb_from_ir", homography=hmat), out / "rgb_from_ir.json")
    if measured is not None:
        rep = calib.error_report(rgb_ir, measured)
        calib.write_document(rep.to_dict(), out / "report.json")
        (out / "report.md").write_text(rep.format_table() + "\n")
        print(rep.format_table())
    print(f"results -> {out}")


def cmd_report(cfg, args):
    est = calib.read_transform(args.estimate) if args.estimate else cfg.transform("report.estimate")
    if args.measured:
        try:
            vals = [float(v) for v in args.measured.split(",")]
            if len(vals) != 6:
                raise ValueError
            measured = EulerPose(*vals)
        except (TypeError, ValueError):
            raise ConfigError("expected six comma-separated numbers", "--measured") from None
    else:
        measured = cfg.measured()
        if measured is None:
            raise ConfigError("no measured reference", "measured")
    initial = calib.read_transform(args.initial) if args.initial else None
    rep = calib.error_report(est, measured, initial)
    if args.output:
        calib.write_document(rep.to_dict(), args.output)
    print(rep.format_table())


# --------------------------------------------------------------------- warp

def _homography_from_doc(cfg):
    hval = cfg.get("warp.homography", None)
    if hval is None:
        return None
    if isinstance(hval, str):
        doc = json.loads(cfg.path("warp.homography").read_text())
        hval = doc.get("homography")
        if hval is None:
            raise ConfigError("document has no 'homography' entry", "warp.homography")
    try:
        return np.asarray(hval, dtype=float).reshape(3, 3)
    except ValueError:
        raise ConfigError("homography needs 9 numbers", "warp.homography") from None


def cmd_warp(cfg, args):
    k_rgb, k_ir = cfg.intrinsics("rgb"), cfg.intrinsics("ir")
    rgb = read_image(cfg.path("cameras.rgb.image"))
    ir = read_image(cfg.path("cameras.ir.image"))
    interp = cfg.get("warp.interpolation", "bilinear")
    if interp not in ("nearest", "bilinear"):
        raise ConfigError(f"unknown interpolation '{interp}'", "warp.interpolation")
    hmat = _homography_from_doc(cfg)
    if hmat is None:
        extr = cfg.get("warp.extrinsic", None)
        if extr is None:
            raise ConfigError("need warp.homography or warp.extrinsic", "warp")
        t_rgb_ir = cfg.transform("warp.extrinsic")
        plane = cfg.plane()
        if plane is None:
            raise ConfigError("extrinsic warping needs a plane model", "plane")
        out_img, mask = warp.warp_rgb_to_ir(rgb, t_rgb_ir, k_rgb, k_ir, plane, interp)
    else:
        out_img, mask = warp.warp_image(rgb, hmat, k_ir.width, k_ir.height, interp)
    out = _output_dir(cfg, args, "warp", "warped")
    stem = cfg.get("warp.stem", "frame")
    write_png(out_img, out / f"{stem}_rgbwarp.png")
    write_png(ir, out / f"{stem}_ir.png")
    write_png((mask * 255).astype(np.uint8), out / f"{stem}_mask.png")
    print(f"{mask.mean() * 100:.1f}% valid -> {out / stem}_*.png")


# -------------------------------------------------------------------- label

def _read_csv_columns(path, columns):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        rows = list(reader)
    try:
        return {c: np.array([float(r[c]) for r in rows]) for c in columns}
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def read_trajectory(path):
    cols = _read_csv_columns(path, ["timestamp", "x", "y", "z", "qx", "qy", "qz", "qw"])
    poses = [RigidTransform(np.array([qx, qy, qz, qw]), np.array([x, y, z]))
             for x, y, z, qx, qy, qz, qw in zip(*(cols[c] for c in ("x", "y", "z", "qx", "qy", "qz", "qw")))]
    return costpipe.Trajectory(cols["timestamp"], poses)


def cmd_label(cfg, args):
    imu = _read_csv_columns(cfg.path("label.imu"), ["timestamp", "acc_z", "vx", "vy"])
    traj = read_trajectory(cfg.path("label.trajectory"))
    cam = cfg.get("label.camera", "ir")
    k = cfg.intrinsics(cam)
    base_from_cam = cfg.transform("label.base_from_camera")
    window = cfg.number("label.window", 1.0, minimum=0, strict=True)
    max_gap = cfg.number("label.max_gap", 0.5, minimum=0, strict=True)
    lookahead = [float(v) for v in cfg.get("label.lookahead", [1.0, 2.0])]
    fp = cfg.get("label.footprint", {}) or {}
    footprint = costpipe.Footprint(float(fp.get("length", 0.8)), float(fp.get("width", 0.6)))
    patch_size = int(cfg.number("label.patch_size", 64, kind=int, minimum=1))
    frames = cfg.get("label.frames")
    patch_dir = cfg.get("label.patch_dir", None)
    if patch_dir is not None:
        patch_dir = cfg.resolve(patch_dir)
        patch_dir.mkdir(parents=True, exist_ok=True)

    ts = imu["timestamp"]
    dt = np.diff(ts)
    if len(ts) < 2 or np.any(dt <= 0):
        raise ConfigError("IMU timestamps must be strictly increasing with >= 2 rows", "label.imu")
    fs = 1.0 / float(np.median(dt))

    rows, flagged = [], 0
    for fi, frame in enumerate(frames):
        t0 = float(frame["timestamp"])
        if frame.get("image"):
            image = read_image(cfg.resolve(frame["image"]))
        else:
            image = np.zeros((k.height, k.width), dtype=np.uint8)
        for dt_ahead in lookahead:
            t1 = t0 + dt_ahead
            try:
                cam_pose = compose(traj.pose_at(t0, max_gap), base_from_cam)
                patch, center = costpipe.footprint_patch(image, cam_pose, traj, t1, k, patch_size,
                                                         footprint, t0, max_gap)
                sel = np.abs(ts - t1) <= window / 2
                win = costpipe.ImuWindow(fs, imu["acc_z"][sel], float(ts[sel][0]) if sel.any() else t1)
                vel = costpipe.VelocitySample(float(imu["vx"][sel].mean()), float(imu["vy"][sel].mean()), t1)
                label = costpipe.psd_cost(win, vel)
            except FusionCalError as exc:
                flagged += 1
                log.warning("frame %d, t1=%.3f: %s", fi, t1, exc)
                rows.append([_fmt(t1), "nan", "nan", "nan"])
                continue
            rows.append([_fmt(t1), _fmt(center[0]), _fmt(center[1]), _fmt(label.y)])
            if patch_dir is not None and frame.get("image"):
                write_png(_to_uint8(patch), patch_dir / f"patch_{fi:04d}_{dt_ahead:g}.png")
    out = Path(args.output) if args.output else cfg.resolve(cfg.get("label.output", "labels.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["timestamp", "patch_u", "patch_v", "y"])
        w.writerows(rows)
    if flagged:
        print(f"WARNING {flagged} label row(s) flagged (nan)", file=sys.stderr)
    print(f"{len(rows)} labels -> {out}")


# ------------------------------------------------------------------ costmap

def cmd_costmap(cfg, args):
    rgb = read_image(cfg.path("costmap.rgb"))
    ir = read_image(cfg.path("costmap.ir"))
    mask_path = cfg.path("costmap.mask", default=None)
    mask = read_image(mask_path) > 0 if mask_path is not None else None
    h, w = ir.shape[:2]
    i = cfg.number("costmap.patch_size", 128, kind=int)
    s = cfg.number("costmap.stride", 64, kind=int)
    try:
        grid_cfg = costpipe.PatchGridConfig(w, h, i, s)
    except ValueError as exc:
        raise ConfigError(str(exc), "costmap.patch_size/stride") from None
    speed = cfg.number("costmap.speed", 0.0, minimum=0)
    enc = costpipe.FourierEncoder(int(cfg.get("fourier.m", 16)), float(cfg.get("fourier.sigma", 1.0)),
                                  int(cfg.get("fourier.seed", cfg.get("seed", 0))))
    max_invalid = cfg.number("costmap.max_invalid", 0.10, minimum=0)
    pairs = costpipe.extract_patch_pairs(rgb, ir, grid_cfg, mask, max_invalid)
    grid = costpipe.score_grid(pairs, speed, costpipe.VarianceScorer(), enc, grid_cfg, args.threads)
    out = _output_dir(cfg, args, "costmap", "costmap")
    with open(out / "grid.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        for row in grid.costs:
            wr.writerow(["unknown" if not np.isfinite(c) else _fmt(c) for c in row])
    write_png(costpipe.render_costmap(grid, grid_cfg), out / "costmap.png")
    print(f"{grid.rows}x{grid.cols} grid, {int(grid.known.sum())} known cells -> {out}")


# --------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "usage")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config (YAML/JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override a config field, e.g. ransac.max_iterations=500")

    p = _Parser(prog="fusioncal", description=__doc__, parents=[common],
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"fusioncal {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("accumulate", cmd_accumulate, "merge LiDAR scans with ICP")
    sp.add_argument("--scans")
    sp.add_argument("--output")

    sp = add("render", cmd_render, "render a LiDAR intensity image")
    sp.add_argument("--camera", default="rgb")
    sp.add_argument("--output-dir")

    sp = add("detect", cmd_detect, "FAST corners + binary descriptors")
    sp.add_argument("--image", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--max-keypoints", type=int, default=500)
    sp.add_argument("--threshold", type=float, default=20.0)
    sp.add_argument("--equalize", action="store_true")

    sp = add("match", cmd_match, "detect and match two images into a match file")
    sp.add_argument("--image-a", required=True, help="camera image")
    sp.add_argument("--image-b", required=True, help="LiDAR intensity image")
    sp.add_argument("--output", required=True)
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--no-cross-check", action="store_true")
    sp.add_argument("--no-equalize", action="store_true")
    sp.add_argument("--max-keypoints", type=int, default=1000)
    sp.add_argument("--threshold", type=float, default=20.0)

    sp = add("lift", cmd_lift, "lift camera/intensity matches to 2D-3D correspondences")
    sp.add_argument("--camera", default="rgb")
    sp.add_argument("--output", required=True)

    sp = add("calibrate", cmd_calibrate, "estimate rgb/ir-from-lidar and rgb-from-ir")
    sp.add_argument("--output-dir")

    sp = add("warp", cmd_warp, "warp the RGB image into the IR view")
    sp.add_argument("--output-dir")

    sp = add("label", cmd_label, "footprint patches and vibration cost labels")
    sp.add_argument("--output")

    sp = add("costmap", cmd_costmap, "patch grid scored by the baseline scorer")
    sp.add_argument("--output-dir")

    sp = add("report", cmd_report, "compare an extrinsic against a measured reference")
    sp.add_argument("--estimate")
    sp.add_argument("--measured", help="x,y,z,roll,pitch,yaw (m, deg)")
    sp.add_argument("--initial")
    sp.add_argument("--output")
    return p


def _error_line(code, module, message):
    print(f"ERROR {code} {module} {message}", file=sys.stderr)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        for name, default in (("config", None), ("seed", None), ("threads", 1), ("verbose", 0), ("set", [])):
            if not hasattr(args, name):
                setattr(args, name, default)
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                            logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = PipelineConfig.load(args.config)
        for item in args.set:
            cfg.apply_override(item)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        args.func(cfg, args)
    except ConfigError as exc:
        _error_line(EXIT_USAGE, exc.module, exc)
        return EXIT_USAGE
    except FusionCalError as exc:
        _error_line(EXIT_DATA, exc.module, exc)
        return EXIT_DATA
    except (ValueError, np.linalg.LinAlgError) as exc:
        _error_line(EXIT_DATA, "fusioncal", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

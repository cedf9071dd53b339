"""Synthetic scenes and the bundled RGB / IR / LiDAR rig fixture.

Run ``python -m fusioncal.synthetic OUTDIR`` to regenerate the fixture used
by the end-to-end CLI tests.
"""

from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .cloudmap import PointCloud, lookup_3d, render_intensity_image, save_intensity_image
from .correspond import Keypoint, Match, save_matches
from .geometry import (
    CameraIntrinsics,
    EulerPose,
    RigidTransform,
    apply,
    compose,
    from_euler,
    invert,
    pixel_to_normalized,
    project_unchecked,
    rotvec_to_matrix,
    unproject,
)
from .pointio import write_ply

# LiDAR axes (x forward, y left, z up) to camera axes (x right, y down, z forward)
CAM_FROM_LIDAR_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

FLOOR_HEIGHT = 1.0  # LiDAR origin above the floor, meters


def random_pose(rng, max_angle_deg, max_translation):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_angle_deg))
    t = rng.normal(size=3)
    t *= rng.uniform(0.0, max_translation) / np.linalg.norm(t)
    return RigidTransform.from_rt(rotvec_to_matrix(axis * angle), t)


def frustum_correspondences(rng, k, cam_from_world, n, depth=(2.0, 10.0), noise=0.0, n_outliers=0):
    """World points visible in ``k`` with their (optionally noisy) pixels.

    The first ``n`` rows are inliers; ``n_outliers`` rows follow whose
    pixels are redrawn uniformly over the image.
    """
    px = np.column_stack([rng.uniform(0, k.width, n), rng.uniform(0, k.height, n)])
    pc = unproject(k, px, rng.uniform(*depth, n))
    world = apply(invert(cam_from_world), pc)
    obs = px + rng.normal(0.0, noise, px.shape) if noise > 0 else px
    if n_outliers:
        opx = np.column_stack([rng.uniform(0, k.width, n_outliers), rng.uniform(0, k.height, n_outliers)])
        opc = unproject(k, opx, rng.uniform(*depth, n_outliers))
        world = np.vstack([world, apply(invert(cam_from_world), opc)])
        obs = np.vstack([obs, np.column_stack([rng.uniform(0, k.width, n_outliers),
                                               rng.uniform(0, k.height, n_outliers)])])
    return world, obs


def corner_cloud(rng, n=1000):
    """Asymmetric cloud: three orthogonal planar patches plus a blob."""
    parts = [
        rng.uniform([0, 0, 0], [4, 3, 0], (int(0.4 * n), 3)),
        rng.uniform([0, 0, 0], [0, 3, 2], (int(0.3 * n), 3)),
        rng.uniform([0, 0, 0], [4, 0, 2], (int(0.2 * n), 3)),
    ]
    parts.append(rng.normal([2.5, 1.0, 0.7], 0.3, (n - sum(len(p) for p in parts), 3)))
    pts = np.vstack(parts)
    return PointCloud(pts, rng.uniform(0, 255, n))


def _hash01(a, b):
    v = np.sin(a * 12.9898 + b * 78.233) * 43758.5453
    return v - np.floor(v)


def floor_texture(x, y):
    """Reflectance in [0, 1]; smooth for y < 0, cell noise for y >= 0."""
    base = 0.5 + 0.25 * np.sin(1.3 * x) * np.cos(0.9 * y)
    cells = _hash01(np.floor(x / 0.15), np.floor(y / 0.15))
    return np.clip(np.where(y >= 0.0, 0.2 + 0.6 * cells, base), 0.0, 1.0)


def wall_texture(u, v):
    stripes = 0.5 + 0.4 * np.sign(np.sin(2.1 * u) * np.sin(1.7 * v))
    return np.clip(0.3 * stripes + 0.7 * _hash01(np.floor(u / 0.4), np.floor(v / 0.4)), 0, 1)


def room_cloud(rng, n=10000):
    """Box room in LiDAR coordinates with textured reflectivity."""
    h = FLOOR_HEIGHT
    n_floor, n_front, n_side = int(0.45 * n), int(0.25 * n), int(0.15 * n)
    n_back = n - n_floor - n_front - 2 * n_side
    floor = rng.uniform([-3, -5, -h], [8, 5, -h], (n_floor, 3))
    front = np.column_stack([np.full(n_front, 8.0), rng.uniform(-5, 5, n_front), rng.uniform(-h, 3, n_front)])
    left = np.column_stack([rng.uniform(-3, 8, n_side), np.full(n_side, 5.0), rng.uniform(-h, 3, n_side)])
    right = np.column_stack([rng.uniform(-3, 8, n_side), np.full(n_side, -5.0), rng.uniform(-h, 3, n_side)])
    back = np.column_stack([np.full(n_back, -3.0), rng.uniform(-5, 5, n_back), rng.uniform(-h, 3, n_back)])
    # a box on the floor gives depth discontinuities
    box = rng.uniform([3.5, -1.0, -h], [4.5, 0.5, 0.0], (n // 20, 3))
    pts = np.vstack([floor, front, left, right, back, box])
    inten = np.concatenate([
        floor_texture(floor[:, 0], floor[:, 1]),
        wall_texture(front[:, 1], front[:, 2]),
        wall_texture(left[:, 0], left[:, 2]),
        wall_texture(right[:, 0], right[:, 2]),
        wall_texture(back[:, 1], back[:, 2]),
        np.full(len(box), 0.95),
    ]) * 200.0
    return PointCloud(pts, inten)


def camera_extrinsic(x, y, z, roll, pitch, yaw):
    """cam_from_lidar for a camera at LiDAR-frame position (x, y, z) meters,
    looking along LiDAR +x, rotated by roll/pitch/yaw degrees (pitch < 0 tilts down)."""
    body = from_euler(EulerPose(0, 0, 0, roll, -pitch, yaw))
    lidar_from_cam = compose(RigidTransform.from_rt(body.rotation_matrix, [x, y, z]),
                             RigidTransform.from_rt(CAM_FROM_LIDAR_AXES.T, [0, 0, 0]))
    return invert(lidar_from_cam)


def render_floor_view(k: CameraIntrinsics, cam_from_lidar: RigidTransform, channels=1):
    """Ray-cast the textured floor; pixels above the horizon get 0.1."""
    u, v = np.meshgrid(np.arange(k.width, dtype=float), np.arange(k.height, dtype=float))
    rays = np.concatenate([pixel_to_normalized(k, np.stack([u, v], axis=-1)), np.ones(u.shape + (1,))], axis=-1)
    lidar_from_cam = invert(cam_from_lidar)
    d = rays @ lidar_from_cam.rotation_matrix.T
    o = lidar_from_cam.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (-FLOOR_HEIGHT - o[2]) / d[..., 2]
    hit = np.isfinite(s) & (s > 0) & (s < 60)
    s = np.where(hit, s, 0.0)
    x = o[0] + s * d[..., 0]
    y = o[1] + s * d[..., 1]
    val = np.where(hit, floor_texture(x, y), 0.1)
    img = np.round(val * 255).astype(np.uint8)
    if channels == 3:
        img = np.stack([img, np.round(val * 200 + 20).astype(np.uint8), np.round(255 - val * 180).astype(np.uint8)],
                       axis=-1)
    return img


def floor_plane_in(cam_from_lidar: RigidTransform):
    """Floor as (unit normal, distance) with n . X = d in the camera frame."""
    n = cam_from_lidar.rotation_matrix @ np.array([0.0, 0.0, -1.0])
    d = FLOOR_HEIGHT + float(n @ cam_from_lidar.translation)
    return n, d


def synthetic_matches(k, cam_from_lidar, intensity_img, cloud, step=6, outlier_fraction=0.2, rng=None):
    """Camera/intensity keypoint pairs from known geometry plus random outliers."""
    rng = rng or np.random.default_rng(0)
    kps_cam, kps_int, matches = [], [], []
    for vi in range(step // 2, intensity_img.height, step):
        for ui in range(step // 2, intensity_img.width, step):
            if intensity_img.point_index[vi, ui] < 0:
                continue
            p = lookup_3d(intensity_img, cloud, (ui, vi))
            pc = apply(cam_from_lidar, p)
            if pc[2] <= 0.1:
                continue
            uv = project_unchecked(k, pc)
            if not (0 <= uv[0] <= k.width - 1 and 0 <= uv[1] <= k.height - 1):
                continue
            if rng.uniform() < outlier_fraction:
                uv = np.array([rng.uniform(0, k.width - 1), rng.uniform(0, k.height - 1)])
            matches.append(Match(len(kps_cam), len(kps_int), 1.0))
            kps_cam.append(Keypoint(float(uv[0]), float(uv[1]), 1.0))
            kps_int.append(Keypoint(float(ui), float(vi), 1.0))
    return kps_cam, kps_int, matches


RIG = {
    "k_rgb": CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480),
    "k_ir": CameraIntrinsics(260.0, 260.0, 160.0, 128.0, 320, 256),
    # camera placement in the LiDAR frame: x, y, z (m), roll, pitch, yaw (deg)
    "rgb_pose": (0.10, 0.05, -0.10, 0.0, -14.0, 0.0),
    "ir_pose": (0.10, -0.02, -0.05, 0.5, -15.0, 1.0),
}


def build_rig_fixture(outdir, seed=0, n_points=40000):
    """Write the synthetic rig (cloud, intensity views, matches, images, config)."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cloud = room_cloud(rng, n_points)
    write_ply(cloud, out / "map.ply")

    truth = {}
    for cam in ("rgb", "ir"):
        k = RIG[f"k_{cam}"]
        t_true = camera_extrinsic(*RIG[f"{cam}_pose"])
        truth[cam] = t_true
        guess = compose(random_pose(rng, 2.0, 0.05), t_true)
        (out / f"{cam}_intrinsics.yaml").write_text(yaml.safe_dump(k.to_dict(), sort_keys=True))
        (out / f"{cam}_initial.json").write_text(json.dumps(guess.to_dict(), indent=2, sort_keys=True) + "\n")
        img = render_intensity_image(cloud, k, guess, splat_radius=1)
        save_intensity_image(img, out / f"{cam}_intensity.png", out / f"{cam}_intensity.lidx")
        kc, ki, m = synthetic_matches(k, t_true, img, cloud, rng=rng)
        save_matches(out / f"{cam}_matches.json", kc, ki, m, (k.width, k.height), (img.width, img.height))
        view = render_floor_view(k, t_true, channels=3 if cam == "rgb" else 1)
        Image.fromarray(view).save(out / f"{cam}.png")

    rgb_from_ir = compose(truth["rgb"], invert(truth["ir"]))
    normal, dist = floor_plane_in(truth["ir"])
    (out / "truth.json").write_text(json.dumps({
        "rgb_from_lidar": truth["rgb"].to_dict(),
        "ir_from_lidar": truth["ir"].to_dict(),
        "rgb_from_ir": rgb_from_ir.to_dict(),
    }, indent=2, sort_keys=True) + "\n")
    measured = rgb_from_ir.to_dict()["euler"]
    config = {
        "seed": seed,
        "cloud": "map.ply",
        "cameras": {
            cam: {
                "intrinsics": f"{cam}_intrinsics.yaml",
                "initial": f"{cam}_initial.json",
                "matches": f"{cam}_matches.json",
                "intensity_image": f"{cam}_intensity.lidx",
                "image": f"{cam}.png",
            }
            for cam in ("rgb", "ir")
        },
        "ransac": {"max_iterations": 500, "inlier_threshold": 2.0, "min_inliers": 20},
        "measured": {k: round(v, 6) for k, v in measured.items()},
        "plane": {"normal": [float(v) for v in normal], "distance": float(dist)},
        "calibrate": {"output_dir": "calib"},
        "warp": {"extrinsic": "calib/rgb_from_ir.json", "output_dir": "warped", "stem": "frame0",
                 "interpolation": "bilinear"},
        "costmap": {
            "rgb": "warped/frame0_rgbwarp.png",
            "ir": "warped/frame0_ir.png",
            "mask": "warped/frame0_mask.png",
            "patch_size": 64,
            "stride": 32,
            "speed": 1.5,
            "output_dir": "costmap",
        },
    }
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("outdir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--points", type=int, default=40000)
    args = ap.parse_args(argv)
    print(build_rig_fixture(args.outdir, args.seed, args.points))


if __name__ == "__main__":
    main()

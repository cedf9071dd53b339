"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines
inline; they are also collected in the terminal summary.
"""

import hashlib
import itertools
import time

import numpy as np
import pytest
from scipy import signal

from fusioncal import cli
from fusioncal.calib import RansacParams, compose_rgb_ir, error_report, ransac_calibrate
from fusioncal.cloudmap import IcpParams, icp_align, render_intensity_image
from fusioncal.costpipe import (
    FourierEncoder,
    ImuWindow,
    PatchGridConfig,
    VelocitySample,
    fourier_encode,
    patch_count,
    psd_area,
    psd_cost,
)
from fusioncal.geometry import (
    CameraIntrinsics,
    EulerPose,
    RigidTransform,
    apply,
    compose,
    from_euler,
    invert,
    project,
    project_unchecked,
    rotation_angle_deg,
)
from fusioncal.synthetic import corner_cloud, frustum_correspondences, random_pose, room_cloud
from fusioncal.warp import PlaneModel, apply_homography, homography_from_extrinsics, warp_image

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def pose_error(estimate, truth):
    e = compose(estimate, invert(truth))
    return float(np.linalg.norm(e.translation)), rotation_angle_deg(e.rotation_matrix)


def transform_distance(a, b):
    return float(np.abs(a.as_matrix() - b.as_matrix()).max())


def test_criterion_01_noise_free_calibration(criterion):
    rng = np.random.default_rng(1)
    truth = random_pose(rng, 30.0, 0.5)
    world, px = frustum_correspondences(rng, K500, truth, 200)
    t0 = time.perf_counter()
    res = ransac_calibrate(world, px, K500, RansacParams())
    elapsed = time.perf_counter() - t0
    terr, rerr = pose_error(res.transform, truth)
    ok = terr < 1e-6 and rerr < 1e-5 and elapsed < 1.0
    criterion(1, "noise-free calibration round trip", ok,
              f"translation {terr:.2e} m, rotation {rerr:.2e} deg, {elapsed:.2f} s")


def test_criterion_02_noisy_calibration(criterion):
    rng = np.random.default_rng(2)
    terrs, rerrs, recovered = [], [], []
    t0 = time.perf_counter()
    for trial in range(100):
        truth = random_pose(rng, 30.0, 0.5)
        world, px = frustum_correspondences(rng, K500, truth, 100, noise=0.5, n_outliers=100)
        res = ransac_calibrate(world, px, K500, RansacParams(rng_seed=trial))
        terr, rerr = pose_error(res.transform, truth)
        terrs.append(terr)
        rerrs.append(rerr)
        recovered.append(res.inlier_mask[:100].mean() >= 0.95)
    elapsed = time.perf_counter() - t0
    med_t, med_r, n_rec = float(np.median(terrs)), float(np.median(rerrs)), int(np.sum(recovered))
    ok = med_t < 0.01 and med_r < 0.2 and n_rec >= 95 and elapsed < 60.0
    criterion(2, "calibration under noise and 50% outliers", ok,
              f"median {med_t * 100:.3f} cm / {med_r:.4f} deg, {n_rec}/100 trials recover inliers, {elapsed:.1f} s")


def test_criterion_03_composition_exact(criterion):
    rng = np.random.default_rng(3)
    worst_pair, worst_self = 0.0, 0.0
    for _ in range(1000):
        t_rgb = random_pose(rng, 180.0, 5.0)
        t_ir = random_pose(rng, 180.0, 5.0)
        rgb_ir = compose_rgb_ir(t_rgb, t_ir)
        worst_pair = max(worst_pair, transform_distance(compose(rgb_ir, t_ir), t_rgb))
        worst_self = max(worst_self, transform_distance(compose_rgb_ir(t_rgb, t_rgb), RigidTransform.identity()))
    ok = worst_pair < 1e-9 and worst_self < 1e-9
    criterion(3, "rgb-from-ir composition exactness", ok, f"max deviation {max(worst_pair, worst_self):.1e}")


def test_criterion_04_reference_error_arithmetic(criterion):
    measured = EulerPose(0.07, 0.36, -0.13, 0.0, -16.0, 0.0)
    estimate = from_euler(EulerPose(0.05, 0.343, -0.116, -0.2, -18.11, 0.171))
    rep = error_report(estimate, measured)
    expected = {"x": 2.0, "y": 1.7, "z": 1.4, "roll": 0.2, "pitch": 2.11, "yaw": 0.171}
    got = {axis: abs(rep[axis].error) for axis in expected}
    worst = max(abs(got[a] - expected[a]) for a in expected)
    # float arithmetic on the table's decimals; exact to the printed digits
    ok = worst < 1e-9
    criterion(4, "reference error magnitudes", ok,
              ", ".join(f"{a} {got[a]:.4g}" for a in expected) + f"; max deviation {worst:.1e}")


def _windows(length, i, s):
    return list(range(0, length - i + 1, s))


def test_criterion_05_patch_count(criterion):
    mismatches = 0
    checked = 0
    for w in range(1, 65):
        for h in range(1, 65):
            for i in range(1, min(w, h) + 1):
                # every larger stride yields exactly one window per axis
                for s in range(1, max(w, h) - i + 2):
                    rows, cols, total = patch_count(PatchGridConfig(w, h, i, s))
                    brute = list(itertools.product(_windows(h, i, s), _windows(w, i, s)))
                    checked += 1
                    if (rows * cols, total) != (len(brute), len(brute)) or rows != len(_windows(h, i, s)):
                        mismatches += 1
    thermal = patch_count(PatchGridConfig(640, 512, 128, 64))[2]
    ok = mismatches == 0 and thermal == 63
    criterion(5, "patch count vs brute force", ok, f"{checked} configs, {mismatches} mismatches, 640x512/128/64 -> {thermal}")


def test_criterion_06_fourier_properties(criterion):
    rng = np.random.default_rng(6)
    failures = []
    for _ in range(1000):
        seed, m = int(rng.integers(0, 2**31)), int(rng.integers(1, 65))
        sigma, v = float(rng.uniform(1e-3, 10.0)), float(rng.uniform(0.0, 20.0))
        enc = FourierEncoder(m, sigma, seed)
        g = fourier_encode(enc, v)
        if g.shape != (2 * m,):
            failures.append("length")
        if np.abs(g[:m] ** 2 + g[m:] ** 2 - 1.0).max() > 1e-12:
            failures.append("unit pairs")
        if not np.array_equal(fourier_encode(enc, 0.0), np.r_[np.ones(m), np.zeros(m)]):
            failures.append("gamma(0)")
        if not np.array_equal(FourierEncoder(m, sigma, seed).B, enc.B):
            failures.append("seed")
    criterion(6, "Fourier feature properties", not failures, f"{len(failures)} violations in 1000 draws")


def test_criterion_07_psd_cost_properties(criterion):
    fs = 100.0
    t = np.arange(0, 10.24, 1.0 / fs)
    zero = psd_cost(ImuWindow(fs, np.zeros_like(t)), VelocitySample(1.0, 2.0)).y
    noise = np.random.default_rng(7).normal(size=len(t))
    stationary = psd_cost(ImuWindow(fs, noise), VelocitySample(0.0, 0.0))
    area = psd_area(noise, fs)
    denominator = area / stationary.y
    scale = psd_cost(ImuWindow(fs, 3.0 * noise), VelocitySample(1.0, 0.0)).y / psd_cost(
        ImuWindow(fs, noise), VelocitySample(1.0, 0.0)).y
    sine = np.sin(2 * np.pi * 5.0 * t)
    f, pxx = signal.welch(sine - sine.mean(), fs=fs, window="hann", nperseg=256, noverlap=128, detrend=False)
    oracle = float(np.trapezoid(pxx, f)) if hasattr(np, "trapezoid") else float(np.trapz(pxx, f))
    ours = psd_area(sine, fs)
    rel = abs(ours - oracle) / oracle
    ok = zero == 0.0 and denominator == 10.0 and abs(scale / 9.0 - 1.0) < 0.01 and rel < 0.01
    criterion(7, "vibration cost properties", ok,
              f"zero {zero}, denominator {denominator}, scale ratio {scale:.6f}, oracle rel diff {rel:.1e}")


def test_criterion_08_icp_recovery(criterion):
    rng = np.random.default_rng(8)
    cloud = corner_cloud(rng, 1000)
    truth = random_pose(rng, 10.0, 0.3)
    source = cloud.transformed(invert(truth))
    params = IcpParams(max_iterations=200, convergence_eps=1e-10, max_correspondence_dist=10.0, voxel_size=1e-4)
    t0 = time.perf_counter()
    res = icp_align(source, cloud, None, params)
    elapsed = time.perf_counter() - t0
    terr, rerr = pose_error(res.transform, truth)
    monotone = bool(np.all(np.diff(res.history) <= 1e-12))
    ok = terr < 1e-3 and rerr < 0.05 and elapsed < 2.0 and monotone
    criterion(8, "ICP recovery", ok,
              f"{terr:.1e} m, {rerr:.1e} deg, {res.iterations} iterations, {elapsed:.2f} s, monotone={monotone}")


def test_criterion_09_intensity_image_consistency(criterion):
    cloud = room_cloud(np.random.default_rng(9), 10000)
    k = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240, k1=-0.05, k2=0.01)
    pose = RigidTransform.from_rt(np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
                                  np.array([0.0, 0.2, 0.0]))
    radius = 1
    img = render_intensity_image(cloud, k, pose, radius)
    rows, cols = np.nonzero(img.point_index >= 0)
    uv = project(k, apply(pose, cloud.points[img.point_index[rows, cols]]))
    dist = np.maximum(np.abs(uv[:, 0] - cols), np.abs(uv[:, 1] - rows))
    again = render_intensity_image(cloud, k, pose, radius)
    same = all(hashlib.sha256(a.tobytes()).digest() == hashlib.sha256(b.tobytes()).digest()
               for a, b in ((img.intensity, again.intensity), (img.depth, again.depth),
                            (img.point_index, again.point_index)))
    ok = len(rows) > 0 and float(dist.max()) <= radius + 0.5 and same
    criterion(9, "intensity image self-consistency", ok,
              f"{len(rows)} pixels, max offset {dist.max():.3f} px, deterministic={same}")


def _plane_scene(rng):
    k_rgb = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)
    k_ir = CameraIntrinsics(260.0, 260.0, 160.0, 128.0, 320, 256)
    t_rgb_ir = random_pose(rng, 5.0, 0.1)
    normal = np.array([0.05, -0.2, 1.0])
    plane = PlaneModel(normal, 3.0)
    return k_rgb, k_ir, t_rgb_ir, plane


def test_criterion_10_warp_correctness(criterion):
    rng = np.random.default_rng(10)
    img = rng.integers(0, 256, (120, 160), dtype=np.uint8)
    ident, mask = warp_image(img, np.eye(3), 160, 120, interpolation="nearest")
    identical = np.array_equal(ident, img) and bool(mask.all())

    k_rgb, k_ir, t_rgb_ir, plane = _plane_scene(rng)
    h = homography_from_extrinsics(t_rgb_ir, k_rgb, k_ir, plane)
    # points on the plane n.X = d, in front of the IR camera
    ray = np.column_stack([rng.uniform(-0.4, 0.4, 500), rng.uniform(-0.4, 0.4, 500), np.ones(500)])
    pts_ir = ray * (plane.distance / (ray @ plane.normal))[:, None]
    px_ir = project_unchecked(k_ir, pts_ir)
    px_rgb = project_unchecked(k_rgb, apply(t_rgb_ir, pts_ir))
    transfer = float(np.abs(apply_homography(h, px_ir) - px_rgb).max())

    yy, xx = np.mgrid[0:240, 0:320]
    smooth = (127.5 + 60 * np.sin(xx / 17.0) * np.cos(yy / 23.0) + 40 * np.sin((xx + yy) / 31.0)).round().astype(np.uint8)
    hm = np.array([[1.02, 0.01, -3.0], [-0.015, 0.99, 2.5], [2e-5, -1e-5, 1.0]])
    fwd, m1 = warp_image(smooth, hm, 320, 240)
    back, m2 = warp_image(fwd, np.linalg.inv(hm), 320, 240)
    interior = m2.copy()
    interior[:10], interior[-10:], interior[:, :10], interior[:, -10:] = False, False, False, False
    round_trip = int(np.abs(back.astype(int) - smooth.astype(int))[interior].max())

    ok = identical and transfer < 1e-6 and round_trip <= 2
    criterion(10, "warp correctness", ok,
              f"identity exact={identical}, plane transfer {transfer:.1e} px, round trip {round_trip} levels")


def _run_pipeline(rig):
    cfg = str(rig / "config.yaml")
    for command in ("calibrate", "warp", "costmap"):
        assert cli.main(["--config", cfg, "--seed", "0", command]) == 0
    digests = {}
    for sub in ("calib", "warped", "costmap"):
        for f in sorted((rig / sub).iterdir()):
            digests[f"{sub}/{f.name}"] = hashlib.sha256(f.read_bytes()).hexdigest()
    return digests


@pytest.fixture
def second_rig(tmp_path):
    import shutil

    from conftest import FIXTURE_DIR

    dst = tmp_path / "rig2"
    shutil.copytree(FIXTURE_DIR, dst)
    return dst


def test_criterion_11_cli_determinism(criterion, rig_copy, second_rig):
    t0 = time.perf_counter()
    first = _run_pipeline(rig_copy)
    second = _run_pipeline(second_rig)
    elapsed = time.perf_counter() - t0
    ok = first == second and len(first) >= 7 and elapsed < 30.0
    criterion(11, "end-to-end CLI determinism", ok, f"{len(first)} files identical={first == second}, {elapsed:.1f} s")

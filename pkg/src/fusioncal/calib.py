"""Camera-to-LiDAR extrinsics from 2D-3D correspondences.

Pipeline: a 6-point DLT inside RANSAC proposes ``cam_from_lidar`` poses,
the best consensus set is refined by Levenberg-Marquardt on the image-space
reprojection error, and two camera-from-LiDAR results are chained into the
RGB-from-IR extrinsic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AllBehindCameraError,
    DegenerateConfigurationError,
    InsufficientInliersError,
)
from .geometry import (
    CameraIntrinsics,
    EulerPose,
    RigidTransform,
    compose,
    distort_jacobian,
    invert,
    pixel_to_normalized,
    project_unchecked,
    rotvec_to_matrix,
    to_euler,
)

log = logging.getLogger(__name__)

DEGENERATE_CONDITION = 1e12


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 2000
    inlier_threshold: float = 2.0
    min_inliers: int = 6
    sample_size: int = 6
    rng_seed: int = 0

    def __post_init__(self):
        if self.sample_size < 6:
            raise ValueError("sample_size must be >= 6 for the DLT solver")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class CalibrationResult:
    transform: RigidTransform
    rms_reprojection: float
    inlier_count: int
    inlier_ratio: float
    iterations_used: int
    inlier_mask: np.ndarray = field(repr=False, default=None)


def _as_arrays(points, pixels):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(points) != len(pixels):
        raise ValueError(f"{len(points)} points but {len(pixels)} pixels")
    return points, pixels


def _normalizing_transforms(X, x):
    """Similarity transforms centering points and fixing their mean radius."""
    cX = X.mean(axis=-2, keepdims=True)
    dX = np.linalg.norm(X - cX, axis=-1).mean(axis=-1)
    sX = np.sqrt(3.0) / np.maximum(dX, 1e-300)
    cx = x.mean(axis=-2, keepdims=True)
    dx = np.linalg.norm(x - cx, axis=-1).mean(axis=-1)
    sx = np.sqrt(2.0) / np.maximum(dx, 1e-300)
    return cX, sX, cx, sx


def _dlt_batch(X, xn):
    """Batched linear pose from normalized image coordinates.

    ``X``: (B, n, 3) world points, ``xn``: (B, n, 2) undistorted normalized
    coordinates. Returns rotations (B, 3, 3), translations (B, 3) and a
    validity mask (False where the design matrix is rank deficient).
    """
    B, n, _ = X.shape
    cX, sX, cx, sx = _normalizing_transforms(X, xn)
    Xh = np.concatenate([(X - cX) * sX[:, None, None], np.ones((B, n, 1))], axis=-1)
    u = (xn[..., 0] - cx[..., 0]) * sx[:, None]
    v = (xn[..., 1] - cx[..., 1]) * sx[:, None]
    A = np.zeros((B, 2 * n, 12))
    A[:, 0::2, 0:4] = Xh
    A[:, 0::2, 8:12] = -u[..., None] * Xh
    A[:, 1::2, 4:8] = Xh
    A[:, 1::2, 8:12] = -v[..., None] * Xh
    _, s, vt = np.linalg.svd(A)
    valid = s[:, -2] * DEGENERATE_CONDITION > s[:, 0]
    Pn = vt[:, -1, :].reshape(B, 3, 4)
    # undo the normalizations: P = T2^-1 Pn T3
    T3 = np.zeros((B, 4, 4))
    T3[:, :3, :3] = sX[:, None, None] * np.eye(3)
    T3[:, :3, 3] = -sX[:, None] * cX[:, 0, :]
    T3[:, 3, 3] = 1.0
    T2inv = np.zeros((B, 3, 3))
    T2inv[:, 0, 0] = T2inv[:, 1, 1] = 1.0 / sx
    T2inv[:, :2, 2] = cx[:, 0, :]
    T2inv[:, 2, 2] = 1.0
    P = T2inv @ Pn @ T3
    M = P[:, :, :3]
    sign = np.where(np.linalg.det(M) < 0, -1.0, 1.0)
    P = P * sign[:, None, None]
    U, S, Vt = np.linalg.svd(P[:, :, :3])
    R = U @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        U[flip, :, -1] *= -1
        R = U @ Vt
    scale = S.mean(axis=-1)
    valid &= scale > 0
    t = P[:, :, 3] / np.where(scale > 0, scale, 1.0)[:, None]
    return R, t, valid


def solve_pnp_dlt(points, pixels, k: CameraIntrinsics) -> RigidTransform:
    """Linear camera-from-world pose from >= 6 non-coplanar correspondences."""
    points, pixels = _as_arrays(points, pixels)
    if len(points) < 6:
        raise DegenerateConfigurationError(f"DLT needs >= 6 correspondences, got {len(points)}")
    xn = pixel_to_normalized(k, pixels)
    R, t, valid = _dlt_batch(points[None], xn[None])
    if not valid[0]:
        raise DegenerateConfigurationError("rank-deficient DLT design matrix (collinear or coplanar points?)")
    return RigidTransform.from_rt(R[0], t[0])


def reprojection_errors(t: RigidTransform, points, pixels, k: CameraIntrinsics):
    """Per-correspondence pixel error; ``inf`` for points behind the camera."""
    pc = points @ t.rotation_matrix.T + t.translation
    err = np.full(len(points), np.inf)
    front = pc[:, 2] > 0
    if np.any(front):
        err[front] = np.linalg.norm(project_unchecked(k, pc[front]) - pixels[front], axis=1)
    return err


def _projection_jacobian(k: CameraIntrinsics, pc):
    """d(pixel)/d(camera point), shape (N, 2, 3)."""
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    dn = np.zeros((len(pc), 2, 3))
    dn[:, 0, 0] = 1.0 / z
    dn[:, 0, 2] = -x / z**2
    dn[:, 1, 1] = 1.0 / z
    dn[:, 1, 2] = -y / z**2
    if k.has_distortion:
        dn = distort_jacobian(k, pc[:, :2] / z[:, None]) @ dn
    return np.array([k.fx, k.fy])[None, :, None] * dn


def _left_update(t: RigidTransform, delta):
    r = rotvec_to_matrix(delta[:3])
    return RigidTransform.from_rt(r @ t.rotation_matrix, r @ t.translation + delta[3:])


def refine(initial: RigidTransform, points, pixels, k: CameraIntrinsics,
           max_iters: int = 100, eps: float = 1e-12):
    """Levenberg-Marquardt on sum_i |x_i - pi(T w_i)|^2.

    Only correspondences in front of the camera at ``initial`` take part.
    Steps that raise the cost or push a point behind the camera are
    rejected, so the returned cost never exceeds the initial one.

    Returns
    -------
    transform : RigidTransform
    rms : float
        Root-mean-square of the residual components (pixels, u and v
        pooled) over the used points.
    """
    points, pixels = _as_arrays(points, pixels)
    pc0 = points @ initial.rotation_matrix.T + initial.translation
    use = pc0[:, 2] > 0
    if not np.any(use):
        raise AllBehindCameraError("no correspondence in front of the camera at the initial pose")
    W, x = points[use], pixels[use]

    def residual(t):
        pc = W @ t.rotation_matrix.T + t.translation
        if np.any(pc[:, 2] <= 0):
            return None, pc
        return (project_unchecked(k, pc) - x).reshape(-1), pc

    t = initial
    r, pc = residual(t)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(max_iters):
        if cost == 0.0:
            break
        jp = _projection_jacobian(k, pc)
        skew = np.zeros((len(pc), 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = pc[:, 2], -pc[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = -pc[:, 2], pc[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = pc[:, 1], -pc[:, 0]
        # d(T' w)/d(omega) = -[pc]x, d/d(v) = I
        J = np.concatenate([jp @ skew, jp], axis=2).reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r
        if not np.any(np.abs(g) > 1e-300):
            break
        damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
        try:
            delta = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        cand = _left_update(t, delta)
        r_new, pc_new = residual(cand)
        new_cost = math.inf if r_new is None else float(r_new @ r_new)
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            t, r, pc, cost = cand, r_new, pc_new, new_cost
            lam = max(lam / 10.0, 1e-12)
            if rel < eps:
                break
        else:
            lam *= 10.0
            if lam > 1e16:
                break
    return t, math.sqrt(cost / (2 * len(W)))


def _score_hypotheses(P, x, xn, k, samples, thr):
    """Consensus size of every sampled DLT hypothesis; first maximum wins."""
    n = len(P)
    chunk = max(1, 1_000_000 // max(n, 1))
    best_count, best_R, best_t = -1, None, None
    for start in range(0, len(samples), chunk):
        idx = samples[start:start + chunk]
        R, t, valid = _dlt_batch(P[idx], xn[idx])
        pc = np.einsum("bij,nj->bni", R, P) + t[:, None, :]
        front = pc[..., 2] > 1e-12
        safe = np.where(front[..., None], pc, np.array([0.0, 0.0, 1.0]))
        err = np.linalg.norm(project_unchecked(k, safe) - x[None], axis=-1)
        counts = np.where(valid, np.sum(front & (err < thr), axis=1), -1)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_R, best_t = int(counts[j]), R[j], t[j]
    return best_count, best_R, best_t


def _canonical_order(points, pixels):
    keys = np.concatenate([points, pixels], axis=1)
    return np.lexsort(keys.T[::-1])


def ransac_calibrate(points, pixels, k: CameraIntrinsics, params: RansacParams | None = None,
                     refine_iters: int = 100, refine_eps: float = 1e-12) -> CalibrationResult:
    """RANSAC over 6-point DLT hypotheses, then LM refinement of the consensus.

    Correspondences are put in a canonical (lexicographic) order before the
    seeded sampling, so permuting the input only permutes ``inlier_mask``.
    A fixed number of hypotheses is scored; ties go to the earliest one.
    """
    params = params or RansacParams()
    points, pixels = _as_arrays(points, pixels)
    n = len(points)
    if n < params.sample_size:
        raise InsufficientInliersError(f"{n} correspondences, need at least {params.sample_size}")
    if n < params.min_inliers:
        raise InsufficientInliersError(f"{n} correspondences cannot reach min_inliers={params.min_inliers}")

    order = _canonical_order(points, pixels)
    P, x = points[order], pixels[order]
    xn = pixel_to_normalized(k, x)
    rng = np.random.default_rng(params.rng_seed)
    samples = np.stack([rng.choice(n, params.sample_size, replace=False)
                        for _ in range(params.max_iterations)])

    thr = params.inlier_threshold
    with np.errstate(over="ignore", invalid="ignore"):
        best_count, best_R, best_t = _score_hypotheses(P, x, xn, k, samples, thr)
    if best_count < max(params.min_inliers, params.sample_size):
        raise InsufficientInliersError(
            f"best consensus {max(best_count, 0)} < min_inliers {params.min_inliers}"
        )

    pose = RigidTransform.from_rt(best_R, best_t)
    inliers = reprojection_errors(pose, P, x, k) < thr
    rms = 0.0
    for _ in range(5):
        pose, rms = refine(pose, P[inliers], x[inliers], k, refine_iters, refine_eps)
        updated = reprojection_errors(pose, P, x, k) < thr
        if np.array_equal(updated, inliers) or updated.sum() < params.min_inliers:
            break
        inliers = updated
    count = int(inliers.sum())
    if count < params.min_inliers:
        raise InsufficientInliersError(f"refined consensus {count} < min_inliers {params.min_inliers}")
    mask = np.zeros(n, dtype=bool)
    mask[order[inliers]] = True
    return CalibrationResult(pose, rms, count, count / n, params.max_iterations, mask)


def compose_rgb_ir(t_rgb_li: RigidTransform, t_ir_li: RigidTransform) -> RigidTransform:
    """RGB-from-IR extrinsic: ``t_rgb_li`` after the inverse of ``t_ir_li``."""
    return compose(t_rgb_li, invert(t_ir_li))


@dataclass(frozen=True)
class ErrorRow:
    axis: str
    unit: str
    measured: float
    estimated: float
    error: float
    initial: float | None = None


@dataclass
class ErrorReport:
    """Per-axis comparison; ``error = estimated - measured``, cm and degrees."""

    rows: list

    def __getitem__(self, axis) -> ErrorRow:
        for row in self.rows:
            if row.axis == axis:
                return row
        raise KeyError(axis)

    def to_dict(self):
        return {"convention": "error = estimated - measured",
                "rows": [row.__dict__.copy() for row in self.rows]}

    def format_table(self, digits=4):
        with_init = any(r.initial is not None for r in self.rows)
        head = ["", "Measured"] + (["Initial Estimate"] if with_init else []) + ["Final Estimate", "Error"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in self.rows:
            u = " cm" if r.unit == "cm" else " deg"
            cells = [r.axis, f"{r.measured:.{digits}g}{u}"]
            if with_init:
                cells.append("" if r.initial is None else f"{r.initial:.{digits + 2}g}{u}")
            cells += [f"{r.estimated:.{digits}g}{u}", f"{round(r.error, 9):.{digits}g}{u}"]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)


def _angle_diff(a, b):
    d = (a - b) % 360.0
    return d - 360.0 if d > 180.0 else d


def error_report(estimated: RigidTransform, measured: EulerPose,
                 initial: RigidTransform | None = None) -> ErrorReport:
    est = to_euler(estimated)
    ini = to_euler(initial) if initial is not None else None
    rows = []
    for axis in ("x", "y", "z"):
        m, e = 100.0 * getattr(measured, axis), 100.0 * getattr(est, axis)
        i = None if ini is None else 100.0 * getattr(ini, axis)
        rows.append(ErrorRow(axis, "cm", m, e, e - m, i))
    for axis in ("roll", "pitch", "yaw"):
        m, e = getattr(measured, axis), getattr(est, axis)
        i = None if ini is None else getattr(ini, axis)
        rows.append(ErrorRow(axis, "deg", m, e, _angle_diff(e, m), i))
    return ErrorReport(rows)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def result_document(transform: RigidTransform, name: str, result: CalibrationResult | None = None,
                    inputs=None, homography=None):
    """JSON-ready calibration record (matrix, quaternion, Euler, quality, provenance)."""
    doc = {
        "name": name,
        "tool_version": __version__,
        "matrix": [[float(v) for v in row] for row in transform.as_matrix()],
        **transform.to_dict(),
    }
    if result is not None:
        doc.update(
            rms_reprojection=float(result.rms_reprojection),
            inlier_count=int(result.inlier_count),
            inlier_ratio=float(result.inlier_ratio),
            iterations_used=int(result.iterations_used),
        )
    if homography is not None:
        doc["homography"] = [float(v) for v in np.asarray(homography).reshape(9)]
    if inputs:
        doc["inputs"] = {str(k): file_digest(v) for k, v in sorted(inputs.items())}
    return doc


def write_document(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_transform(path) -> RigidTransform:
    with open(path) as f:
        return RigidTransform.from_dict(json.load(f))

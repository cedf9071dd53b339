"""Bring the RGB image into the IR camera's view.

Homographies here map *output* (IR) pixels to *source* (RGB) pixels, which
is what inverse warping consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HomographyDegenerateError, PlaneBehindCameraError
from .geometry import CameraIntrinsics, RigidTransform, pixel_to_normalized, project_unchecked


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Plane ``{X : normal . X = distance}`` in the IR camera frame."""

    normal: np.ndarray
    distance: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("plane normal must be non-zero")
        if abs(norm - 1.0) > 1e-9:
            n = n / norm
        object.__setattr__(self, "normal", n)
        if not self.distance > 0:
            raise PlaneBehindCameraError("plane distance must be positive")
        object.__setattr__(self, "distance", float(self.distance))


def normalize_homography(h):
    h = np.asarray(h, dtype=float)
    if h[2, 2] != 0:
        h = h / h[2, 2]
    return h


def homography_from_extrinsics(t_rgb_ir: RigidTransform, k_rgb: CameraIntrinsics, k_ir: CameraIntrinsics,
                               plane: PlaneModel) -> np.ndarray:
    """Plane-induced homography from IR pixels to RGB pixels.

    With ``X_rgb = R X_ir + t`` and the plane ``n . X_ir = d`` this is
    ``K_rgb (R + t n^T / d) K_ir^-1``. Distortion is not part of the
    matrix; :func:`warp_rgb_to_ir` handles distorted cameras exactly.
    """
    r, t = t_rgb_ir.rotation_matrix, t_rgb_ir.translation
    n, d = plane.normal, plane.distance
    d_rgb = d + float((r @ n) @ t)
    if d_rgb <= 0:
        raise PlaneBehindCameraError("plane does not lie in front of the RGB camera")
    h = k_rgb.K @ (r + np.outer(t, n) / d) @ np.linalg.inv(k_ir.K)
    return normalize_homography(h)


def apply_homography(h, pts):
    pts = np.asarray(pts, dtype=float)
    q = pts @ h[:, :2].T + h[:, 2]
    return q[..., :2] / q[..., 2:3]


def _hartley(pts):
    c = pts.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(pts - c, axis=-1).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-300)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0, 0]
    t[..., 1, 2] = -s * c[..., 0, 1]
    t[..., 2, 2] = 1.0
    return t


def _dlt_homography(src, dst):
    """Batched normalized DLT. ``src``/``dst``: (B, n, 2). Returns (B, 3, 3)."""
    ts, td = _hartley(src), _hartley(dst)
    hs = np.concatenate([src, np.ones(src.shape[:-1] + (1,))], axis=-1) @ np.swapaxes(ts, -1, -2)
    hd = np.concatenate([dst, np.ones(dst.shape[:-1] + (1,))], axis=-1) @ np.swapaxes(td, -1, -2)
    B, n, _ = src.shape
    A = np.zeros((B, 2 * n, 9))
    x, y = hd[..., 0:1], hd[..., 1:2]
    A[:, 0::2, 3:6] = -hs
    A[:, 0::2, 6:9] = y * hs
    A[:, 1::2, 0:3] = hs
    A[:, 1::2, 6:9] = -x * hs
    _, _, vt = np.linalg.svd(A)
    hn = vt[:, -1, :].reshape(B, 3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    scale = np.where(np.abs(h[:, 2, 2]) > 1e-300, h[:, 2, 2], 1.0)
    return h / scale[:, None, None]


def _collinear(pts, tol=1e-9):
    """True where any three of the points in each (B, n, 2) set are collinear."""
    n = pts.shape[1]
    scale = np.maximum(np.ptp(pts, axis=1).max(axis=-1), 1e-300) ** 2
    bad = np.zeros(pts.shape[0], dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b = pts[:, j] - pts[:, i], pts[:, k] - pts[:, i]
                bad |= np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) < tol * scale
    return bad


def transfer_error(h, src, dst):
    """Symmetric transfer error ``sqrt(|dst - H src|^2 + |src - H^-1 dst|^2)``."""
    fwd = apply_homography(h, src) - dst
    bwd = apply_homography(np.linalg.inv(h), dst) - src
    return np.sqrt((fwd**2).sum(-1) + (bwd**2).sum(-1))


def homography_from_matches(src, dst, threshold=3.0, max_iterations=1000, seed=0):
    """Robust homography ``dst ~ H src`` from >= 4 pixel pairs.

    Returns
    -------
    h : ndarray (3, 3)
    inliers : ndarray of bool
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise HomographyDegenerateError("need >= 4 matched pixel pairs")
    for pts in (src, dst):
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise HomographyDegenerateError("points are collinear")
    rng = np.random.default_rng(seed)
    samples = np.stack([rng.choice(n, 4, replace=False) for _ in range(max_iterations)])
    ok = ~(_collinear(src[samples]) | _collinear(dst[samples]))
    if not np.any(ok):
        raise HomographyDegenerateError("every minimal sample is degenerate")
    samples = samples[ok]
    hs = _dlt_homography(src[samples], dst[samples])
    best, best_count = None, -1
    with np.errstate(all="ignore"):
        for h in hs:
            if abs(np.linalg.det(h)) < 1e-12:
                continue
            count = int(np.sum(transfer_error(h, src, dst) < threshold))
            if count > best_count:
                best, best_count = h, count
    if best is None:
        raise HomographyDegenerateError("no valid homography hypothesis")
    inliers = transfer_error(best, src, dst) < threshold
    for _ in range(3):
        if inliers.sum() < 4:
            break
        h = _dlt_homography(src[inliers][None], dst[inliers][None])[0]
        updated = transfer_error(h, src, dst) < threshold
        best = h
        if np.array_equal(updated, inliers):
            break
        inliers = updated
    return normalize_homography(best), inliers


def sample_image(src, map_u, map_v, interpolation="bilinear", fill=0):
    """Sample ``src`` at float coordinates; returns ``(image, valid_mask)``."""
    src = np.asarray(src)
    h, w = src.shape[:2]
    mu = np.asarray(map_u, dtype=float)
    mv = np.asarray(map_v, dtype=float)
    finite = np.isfinite(mu) & np.isfinite(mv)
    mu = np.where(finite, mu, -1.0)
    mv = np.where(finite, mv, -1.0)
    extra = src.shape[2:]
    if interpolation == "nearest":
        ui = np.floor(mu + 0.5).astype(np.int64)
        vi = np.floor(mv + 0.5).astype(np.int64)
        valid = finite & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        out = np.full(mu.shape + extra, fill, dtype=src.dtype)
        out[valid] = src[vi[valid], ui[valid]]
        return out, valid
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation '{interpolation}'")
    eps = 1e-9
    valid = finite & (mu >= -eps) & (mu <= w - 1 + eps) & (mv >= -eps) & (mv <= h - 1 + eps)
    u = np.clip(mu[valid], 0, w - 1)
    v = np.clip(mv[valid], 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    if extra:
        fu, fv = fu.reshape(fu.shape + (1,) * len(extra)), fv.reshape(fv.shape + (1,) * len(extra))
    s = src.astype(float)
    val = ((1 - fu) * (1 - fv) * s[v0, u0] + fu * (1 - fv) * s[v0, u1]
           + (1 - fu) * fv * s[v1, u0] + fu * fv * s[v1, u1])
    out = np.full(mu.shape + extra, fill, dtype=src.dtype)
    if np.issubdtype(src.dtype, np.integer):
        info = np.iinfo(src.dtype)
        val = np.clip(np.round(val), info.min, info.max)
    out[valid] = val.astype(src.dtype)
    return out, valid


def warp_image(src, h, out_width, out_height, interpolation="bilinear", fill=0):
    """Inverse warp: output pixel ``p`` takes ``src`` at ``H p``.

    Returns the ``(out_height, out_width[, C])`` image and its validity mask.
    """
    h = np.asarray(h, dtype=float)
    u, v = np.meshgrid(np.arange(out_width, dtype=float), np.arange(out_height, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.stack([u, v], axis=-1) @ h[:, :2].T + h[:, 2]
        su, sv = q[..., 0] / q[..., 2], q[..., 1] / q[..., 2]
        behind = q[..., 2] <= 0
    su[behind] = np.nan
    return sample_image(src, su, sv, interpolation, fill)


def warp_rgb_to_ir(rgb, t_rgb_ir: RigidTransform, k_rgb: CameraIntrinsics, k_ir: CameraIntrinsics,
                   plane: PlaneModel, interpolation="bilinear", fill=0):
    """Resample the RGB image on the IR pixel grid through the plane.

    Exact for lens distortion in either camera: every IR pixel is
    undistorted to a ray, intersected with the plane, moved into the RGB
    frame and projected with the RGB camera's distortion.
    """
    if not (k_rgb.has_distortion or k_ir.has_distortion):
        hmat = homography_from_extrinsics(t_rgb_ir, k_rgb, k_ir, plane)
        return warp_image(rgb, hmat, k_ir.width, k_ir.height, interpolation, fill)
    u, v = np.meshgrid(np.arange(k_ir.width, dtype=float), np.arange(k_ir.height, dtype=float))
    rays = np.concatenate([pixel_to_normalized(k_ir, np.stack([u, v], axis=-1)), np.ones(u.shape + (1,))], axis=-1)
    denom = rays @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12, plane.distance / denom, np.nan)
    pts = rays * s[..., None]
    prgb = pts @ t_rgb_ir.rotation_matrix.T + t_rgb_ir.translation
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        good = np.isfinite(prgb[..., 2]) & (prgb[..., 2] > 0)
        uv = np.full(u.shape + (2,), np.nan)
        uv[good] = project_unchecked(k_rgb, prgb[good])
    return sample_image(rgb, uv[..., 0], uv[..., 1], interpolation, fill)

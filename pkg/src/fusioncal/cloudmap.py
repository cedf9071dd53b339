"""Point-cloud mapping and LiDAR intensity-image rendering."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .errors import (
    CloudFormatError,
    EmptyViewError,
    HolePixelError,
    LengthMismatchError,
    NoCorrespondencesError,
    OutOfBoundsError,
)
from .geometry import CameraIntrinsics, RigidTransform, apply, compose, project_unchecked

SIDECAR_MAGIC = b"LIDX"


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensities: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        inten = np.asarray(self.intensities, dtype=float).reshape(-1)
        if len(pts) != len(inten):
            raise LengthMismatchError(f"{len(pts)} points but {len(inten)} intensities")
        if not np.all(np.isfinite(pts)):
            raise CloudFormatError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensities", inten)
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
            if len(ts) != len(pts):
                raise LengthMismatchError(f"{len(pts)} points but {len(ts)} timestamps")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return len(self.points)

    def transformed(self, t: RigidTransform) -> PointCloud:
        return PointCloud(apply(t, self.points), self.intensities, self.timestamps)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_eps: float = 1e-6
    max_correspondence_dist: float = 1.0
    voxel_size: float = 0.05

    def __post_init__(self):
        for name in ("max_iterations", "convergence_eps", "max_correspondence_dist", "voxel_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IcpParams.{name} must be strictly positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    rms_error: float
    iterations: int
    history: list = field(default_factory=list)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Centroid per occupied voxel with mean intensity, voxels in sorted key order."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    pts = np.zeros((n, 3))
    for d in range(3):
        pts[:, d] = np.bincount(inverse, weights=cloud.points[:, d], minlength=n)
    pts /= counts[:, None]
    inten = np.bincount(inverse, weights=cloud.intensities, minlength=n) / counts
    ts = None
    if cloud.timestamps is not None:
        ts = np.bincount(inverse, weights=cloud.timestamps, minlength=n) / counts
    return PointCloud(pts, inten, ts)


def _kabsch(p, q):
    """Rigid transform minimizing sum |R p + t - q|^2."""
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    h = (p - mp).T @ (q - mq)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform.from_rt(r, mq - r @ mp)


def icp_align(source: PointCloud, target: PointCloud, initial: RigidTransform | None = None,
              params: IcpParams | None = None) -> IcpResult:
    """Point-to-point ICP mapping ``source`` into the ``target`` frame.

    ``history`` holds the RMS correspondence distance at the start of each
    iteration followed by the final value.
    """
    params = params or IcpParams()
    initial = initial or RigidTransform.identity()
    if len(source) == 0 or len(target) == 0:
        raise NoCorrespondencesError("empty point cloud")
    src = voxel_downsample(source, params.voxel_size).points
    tgt = voxel_downsample(target, params.voxel_size).points
    tree = cKDTree(tgt)

    def correspondences(t):
        moved = apply(t, src)
        d, idx = tree.query(moved, distance_upper_bound=params.max_correspondence_dist)
        ok = np.isfinite(d)
        if not np.any(ok):
            raise NoCorrespondencesError(
                f"no point pair within {params.max_correspondence_dist} m"
            )
        return moved[ok], tgt[idx[ok]], d[ok]

    t = initial
    history = []
    prev_mean = None
    iterations = 0
    for _ in range(params.max_iterations):
        p, q, d = correspondences(t)
        history.append(float(np.sqrt(np.mean(d * d))))
        mean = float(d.mean())
        if prev_mean is not None and abs(prev_mean - mean) < params.convergence_eps:
            break
        prev_mean = mean
        t = compose(_kabsch(p, q), t)
        iterations += 1
    _, _, d = correspondences(t)
    rms = float(np.sqrt(np.mean(d * d)))
    history.append(rms)
    return IcpResult(t, rms, iterations, history)


def accumulate(scans, poses, voxel_size: float = 0.05) -> PointCloud:
    """Union of pose-transformed scans, voxel-downsampled unless ``voxel_size`` is 0."""
    if len(scans) != len(poses):
        raise LengthMismatchError(f"{len(scans)} scans but {len(poses)} poses")
    if not scans:
        raise LengthMismatchError("need at least one scan")
    moved = [s.transformed(p) for s, p in zip(scans, poses)]
    with_ts = all(s.timestamps is not None for s in moved)
    merged = PointCloud(
        np.concatenate([s.points for s in moved]),
        np.concatenate([s.intensities for s in moved]),
        np.concatenate([s.timestamps for s in moved]) if with_ts else None,
    )
    if not voxel_size:
        return merged
    return voxel_downsample(merged, voxel_size)


@dataclass(eq=False)
class IntensityImage:
    """Rendered LiDAR view. Holes are NaN in intensity/depth and -1 in point_index."""

    intensity: np.ndarray
    depth: np.ndarray
    point_index: np.ndarray

    @property
    def height(self):
        return self.point_index.shape[0]

    @property
    def width(self):
        return self.point_index.shape[1]

    @property
    def holes(self):
        return self.point_index < 0

    def to_uint16(self):
        out = np.zeros(self.point_index.shape, dtype=np.uint16)
        ok = ~self.holes
        out[ok] = np.round(self.intensity[ok] * 65535.0).astype(np.uint16)
        return out

    def to_uint8(self):
        out = np.zeros(self.point_index.shape, dtype=np.uint8)
        ok = ~self.holes
        out[ok] = np.round(self.intensity[ok] * 255.0).astype(np.uint8)
        return out


def render_intensity_image(cloud: PointCloud, k: CameraIntrinsics, cam_from_cloud: RigidTransform,
                           splat_radius: int = 1) -> IntensityImage:
    """Z-buffered projection of ``cloud`` into a virtual camera.

    Every point writes the square of pixels within ``splat_radius``
    (Chebyshev) of its rounded projection; per pixel the smallest range
    wins, ties go to the lower point index. Intensities of the winning
    points are stretched from their 1st-99th percentile to [0, 1].
    """
    if len(cloud) == 0:
        raise EmptyViewError("empty point cloud")
    splat_radius = int(splat_radius)
    if splat_radius < 0:
        raise ValueError("splat_radius must be >= 0")
    pc = apply(cam_from_cloud, cloud.points)
    front = np.flatnonzero(pc[:, 2] > 1e-9)
    pc = pc[front]
    # beyond the fold of the radial polynomial distorted points wrap back into view
    r2 = (pc[:, 0] ** 2 + pc[:, 1] ** 2) / pc[:, 2] ** 2
    monotone = 1.0 + 3.0 * k.k1 * r2 + 5.0 * k.k2 * r2 * r2 > 0.0
    pc, front = pc[monotone], front[monotone]
    uv = project_unchecked(k, pc)
    ok = np.all(np.abs(uv) < 1e9, axis=1)
    front, pc, uv = front[ok], pc[ok], uv[ok]
    rng = np.linalg.norm(pc, axis=1)
    ui = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    vi = np.floor(uv[:, 1] + 0.5).astype(np.int64)

    offs = np.arange(-splat_radius, splat_radius + 1)
    du, dv = np.meshgrid(offs, offs)
    du, dv = du.ravel(), dv.ravel()
    cu = (ui[:, None] + du[None, :]).ravel()
    cv = (vi[:, None] + dv[None, :]).ravel()
    cidx = np.repeat(front, len(du))
    crng = np.repeat(rng, len(du))
    inside = (cu >= 0) & (cu < k.width) & (cv >= 0) & (cv < k.height)
    if not np.any(inside):
        raise EmptyViewError("no point projects inside the image")
    cu, cv, cidx, crng = cu[inside], cv[inside], cidx[inside], crng[inside]
    pix = cv * k.width + cu
    order = np.lexsort((cidx, crng, pix))
    pix, cidx, crng = pix[order], cidx[order], crng[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, cidx, crng = pix[first], cidx[first], crng[first]

    raw = cloud.intensities[cidx]
    winners = np.unique(cidx)
    lo, hi = np.percentile(cloud.intensities[winners], [1.0, 99.0])
    if hi > lo:
        norm = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    else:
        norm = np.ones_like(raw)

    n = k.width * k.height
    intensity = np.full(n, np.nan)
    depth = np.full(n, np.nan)
    index = np.full(n, -1, dtype=np.int64)
    intensity[pix] = norm
    depth[pix] = crng
    index[pix] = cidx
    shape = (k.height, k.width)
    return IntensityImage(intensity.reshape(shape), depth.reshape(shape), index.reshape(shape))


def lookup_3d(img: IntensityImage, cloud: PointCloud, px) -> np.ndarray:
    """Source point recorded at the nearest integer pixel to ``px``."""
    u, v = float(px[0]), float(px[1])
    ui, vi = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
    if not (0 <= ui < img.width and 0 <= vi < img.height):
        raise OutOfBoundsError(f"pixel ({u}, {v}) outside {img.width}x{img.height} image")
    idx = int(img.point_index[vi, ui])
    if idx < 0:
        raise HolePixelError(f"pixel ({ui}, {vi}) is a hole")
    return cloud.points[idx].copy()


def save_intensity_image(img: IntensityImage, png_path, sidecar_path=None):
    """16-bit PNG of intensity plus a binary depth/index sidecar.

    Sidecar layout (little-endian): ``b"LIDX"``, uint32 width, uint32
    height, float32[height*width] depth (NaN at holes), int32[height*width]
    point index (-1 at holes), both row-major.
    """
    Image.fromarray(img.to_uint16()).save(png_path, format="PNG")
    if sidecar_path is None:
        sidecar_path = Path(png_path).with_suffix(".lidx")
    with open(sidecar_path, "wb") as f:
        f.write(SIDECAR_MAGIC + struct.pack("<II", img.width, img.height))
        f.write(img.depth.astype("<f4").tobytes())
        f.write(img.point_index.astype("<i4").tobytes())
    return Path(sidecar_path)


def load_intensity_image(sidecar_path, png_path=None) -> IntensityImage:
    data = Path(sidecar_path).read_bytes()
    if data[:4] != SIDECAR_MAGIC or len(data) < 12:
        raise CloudFormatError(f"{sidecar_path}: not an intensity-image sidecar")
    w, h = struct.unpack("<II", data[4:12])
    n = w * h
    if len(data) != 12 + 8 * n:
        raise CloudFormatError(f"{sidecar_path}: expected {12 + 8 * n} bytes, got {len(data)}")
    depth = np.frombuffer(data, dtype="<f4", count=n, offset=12).astype(float).reshape(h, w)
    index = np.frombuffer(data, dtype="<i4", count=n, offset=12 + 4 * n).astype(np.int64).reshape(h, w)
    holes = index < 0
    depth[holes] = np.nan
    intensity = np.zeros((h, w))
    if png_path is not None:
        intensity = np.asarray(Image.open(png_path), dtype=float) / 65535.0
        if intensity.shape != (h, w):
            raise CloudFormatError(f"{png_path}: size does not match sidecar")
    intensity[holes] = np.nan
    return IntensityImage(intensity, depth, index)

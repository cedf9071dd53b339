"""Self-supervised traversability costmap data pipeline.

Patch sampling over a co-registered RGB/IR pair, vibration-based cost
labels, Fourier velocity features and cost-grid assembly around a
pluggable patch scorer.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import (
    FootprintNotVisibleError,
    SizeMismatchError,
    TrajectoryGapError,
    WindowTooShortError,
)
from .geometry import CameraIntrinsics, RigidTransform, apply, interpolate, invert, project_unchecked
from .warp import sample_image

log = logging.getLogger(__name__)

UNKNOWN = float("nan")  # cost of skipped / failed cells

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class PatchGridConfig:
    w: int
    h: int
    i: int
    s: int

    def __post_init__(self):
        if not (1 <= self.i <= min(self.w, self.h)):
            raise ValueError(f"patch size {self.i} must be in [1, min(w, h)={min(self.w, self.h)}]")
        if self.s < 1:
            raise ValueError("stride must be >= 1")


def patch_count(cfg: PatchGridConfig):
    """Sliding-window grid size: ``(rows, cols, rows * cols)``."""
    cols = math.floor((cfg.w - cfg.i) / cfg.s + 1)
    rows = math.floor((cfg.h - cfg.i) / cfg.s + 1)
    return rows, cols, rows * cols


@dataclass(eq=False)
class PatchPair:
    rgb: np.ndarray
    ir: np.ndarray
    row: int
    col: int
    top_left: tuple
    skipped: bool = False
    invalid_fraction: float = 0.0


def extract_patch_pairs(rgb_warped, ir, cfg: PatchGridConfig, validity_mask=None, max_invalid=0.10):
    """Cut both images into the sliding-window grid, row-major.

    Patches whose invalid-pixel fraction exceeds ``max_invalid`` are kept
    in the list with ``skipped=True`` so grid indices stay aligned.
    """
    rgb_warped, ir = np.asarray(rgb_warped), np.asarray(ir)
    for name, img in (("rgb", rgb_warped), ("ir", ir)):
        if img.shape[:2] != (cfg.h, cfg.w):
            raise SizeMismatchError(f"{name} image is {img.shape[1]}x{img.shape[0]}, config says {cfg.w}x{cfg.h}")
    if validity_mask is not None:
        validity_mask = np.asarray(validity_mask, dtype=bool)
        if validity_mask.shape != (cfg.h, cfg.w):
            raise SizeMismatchError("validity mask size does not match config")
    rows, cols, _ = patch_count(cfg)
    pairs = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * cfg.s, c * cfg.s
            sl = (slice(y, y + cfg.i), slice(x, x + cfg.i))
            frac = 0.0 if validity_mask is None else 1.0 - validity_mask[sl].mean()
            pairs.append(PatchPair(rgb_warped[sl], ir[sl], r, c, (x, y), frac > max_invalid, float(frac)))
    return pairs


@dataclass(frozen=True, eq=False)
class ImuWindow:
    sample_rate: float
    acc_z: np.ndarray
    t_start: float = 0.0
    t_end: float | None = None

    def __post_init__(self):
        acc = np.asarray(self.acc_z, dtype=float).reshape(-1)
        object.__setattr__(self, "acc_z", acc)
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if len(acc) < 2:
            raise WindowTooShortError(f"IMU window has {len(acc)} samples, need >= 2")
        if self.t_end is None:
            object.__setattr__(self, "t_end", self.t_start + (len(acc) - 1) / self.sample_rate)


@dataclass(frozen=True)
class VelocitySample:
    vx: float
    vy: float
    timestamp: float = 0.0

    @property
    def speed(self):
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class CostLabel:
    y: float
    t_start: float
    t_end: float


def welch_psd(x, fs, nperseg=256, overlap=0.5):
    """One-sided Welch PSD with a periodic Hann window (density scaling).

    ``nperseg`` is capped at the signal length. Returns ``(freqs, psd)``.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    nseg = min(int(nperseg), n)
    step = max(nseg - int(nseg * overlap), 1)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(nseg) / nseg)
    wss = float(np.sum(window**2))
    if wss == 0.0:
        window = np.ones(nseg)
        wss = float(nseg)
    starts = range(0, n - nseg + 1, step)
    acc = np.zeros(nseg // 2 + 1)
    count = 0
    for s in starts:
        spec = np.fft.rfft(x[s:s + nseg] * window)
        acc += np.abs(spec) ** 2
        count += 1
    psd = acc / (count * fs * wss)
    # fold negative frequencies, except DC and (even length) Nyquist
    if nseg % 2 == 0:
        psd[1:-1] *= 2.0
    else:
        psd[1:] *= 2.0
    return np.fft.rfftfreq(nseg, 1.0 / fs), psd


def psd_area(acc_z, fs, nperseg=256, overlap=0.5, band=None):
    """Trapezoidal area under the PSD of the mean-removed signal."""
    acc = np.asarray(acc_z, dtype=float)
    f, p = welch_psd(acc - acc.mean(), fs, nperseg, overlap)
    if band is not None:
        lo, hi = band
        keep = (f >= lo) & (f <= hi)
        f, p = f[keep], p[keep]
    if len(f) < 2:
        return 0.0
    return float(_trapezoid(p, f))


def psd_cost(imu: ImuWindow, vel: VelocitySample, nperseg=256, overlap=0.5, band=None) -> CostLabel:
    """Vibration cost label: PSD area over ``speed + 10``."""
    area = psd_area(imu.acc_z, imu.sample_rate, nperseg, overlap, band)
    return CostLabel(area / (vel.speed + 10.0), imu.t_start, imu.t_end)


@dataclass(frozen=True, eq=False)
class FourierEncoder:
    """Random Fourier features; ``B`` has shape (m, d), drawn from N(0, sigma^2)."""

    m: int = 16
    sigma: float = 1.0
    rng_seed: int = 0
    d: int = 1
    B: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be >= 1")
        b = np.random.default_rng(self.rng_seed).normal(0.0, self.sigma, (self.m, self.d))
        b.setflags(write=False)
        object.__setattr__(self, "B", b)


def fourier_encode(enc: FourierEncoder, v) -> np.ndarray:
    """``[cos(2 pi B v), sin(2 pi B v)]`` of length ``2m``."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    arg = 2.0 * np.pi * (enc.B @ v)
    return np.concatenate([np.cos(arg), np.sin(arg)])


@dataclass(frozen=True)
class Footprint:
    """Ground-contact rectangle centered on the robot base origin (meters)."""

    length: float = 0.8
    width: float = 0.6

    def corners(self):
        hl, hw = self.length / 2, self.width / 2
        return np.array([[hl, hw, 0.0], [hl, -hw, 0.0], [-hl, -hw, 0.0], [-hl, hw, 0.0]])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timed world-from-base poses, sorted by time."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) != len(self.poses) or len(ts) == 0:
            raise ValueError("trajectory needs matching, non-empty timestamps and poses")
        if np.any(np.diff(ts) < 0):
            raise ValueError("trajectory timestamps must be sorted")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def pose_at(self, t, max_gap=None) -> RigidTransform:
        ts = self.timestamps
        if t < ts[0] or t > ts[-1]:
            raise TrajectoryGapError(f"time {t} outside trajectory [{ts[0]}, {ts[-1]}]")
        j = int(np.searchsorted(ts, t, side="right"))
        if j == 0 or ts[j - 1] == t:
            return self.poses[max(j - 1, 0)]
        if j == len(ts):
            return self.poses[-1]
        t0, t1 = ts[j - 1], ts[j]
        if max_gap is not None and t1 - t0 > max_gap:
            raise TrajectoryGapError(f"trajectory gap of {t1 - t0:.3f} s around t={t}")
        return interpolate(self.poses[j - 1], self.poses[j], (t - t0) / (t1 - t0))


def resize_bilinear(img, size):
    """Resize to ``size x size`` with bilinear sampling of pixel centers."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    u = (np.arange(size) + 0.5) * w / size - 0.5
    v = (np.arange(size) + 0.5) * h / size - 0.5
    uu, vv = np.meshgrid(np.clip(u, 0, w - 1), np.clip(v, 0, h - 1))
    out, _ = sample_image(img, uu, vv, "bilinear")
    return out


def footprint_patch(image_at_t0, cam_pose_at_t0: RigidTransform, trajectory: Trajectory, t1: float,
                    k: CameraIntrinsics, patch_size: int = 64, footprint: Footprint = Footprint(),
                    t0: float | None = None, max_gap=None):
    """Image patch under the robot's footprint at ``t1``, seen from the ``t0`` frame.

    ``cam_pose_at_t0`` is world-from-camera; trajectory poses are
    world-from-base with the footprint on the base's z = 0 plane. The
    projected rectangle's bounding box must lie fully inside the image.

    Returns
    -------
    patch : ndarray
        Bounding-box crop resized to ``patch_size x patch_size``.
    center : Pixel-like ndarray (2,)
        Projection of the footprint center.
    """
    if t0 is not None and t1 < t0:
        raise ValueError("t1 must not precede t0")
    base = trajectory.pose_at(t1, max_gap)
    cam_from_world = invert(cam_pose_at_t0)
    pts = apply(cam_from_world, apply(base, np.vstack([footprint.corners(), [0.0, 0.0, 0.0]])))
    if np.any(pts[:, 2] <= 1e-6):
        raise FootprintNotVisibleError("footprint behind the camera")
    uv = project_unchecked(k, pts)
    lo = np.floor(uv[:4].min(axis=0)).astype(int)
    hi = np.ceil(uv[:4].max(axis=0)).astype(int)
    img = np.asarray(image_at_t0)
    h, w = img.shape[:2]
    if lo[0] < 0 or lo[1] < 0 or hi[0] > w - 1 or hi[1] > h - 1:
        raise FootprintNotVisibleError(f"footprint box {lo.tolist()}-{hi.tolist()} leaves the {w}x{h} image")
    crop = img[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
    return resize_bilinear(crop, patch_size), uv[4]


@runtime_checkable
class PatchScorer(Protocol):
    """Maps (rgb patch, ir patch, encoded velocity) to a scalar cost.

    ``thread_safe`` declares whether the scorer may be called from several
    threads at once.
    """

    thread_safe: bool

    def __call__(self, rgb_patch, ir_patch, velocity_features) -> float: ...


class ConstantScorer:
    thread_safe = True

    def __init__(self, value=1.0):
        self.value = float(value)

    def __call__(self, rgb_patch, ir_patch, velocity_features):
        return self.value


def _normalized_gray(patch):
    p = np.asarray(patch)
    scale = 255.0 if p.dtype == np.uint8 else (65535.0 if p.dtype == np.uint16 else 1.0)
    p = p.astype(float) / scale
    if p.ndim == 3:
        p = p[..., :3].mean(axis=-1)
    return p


class VarianceScorer:
    """Mean of the two modalities' grayscale variances (intensities in [0, 1])."""

    thread_safe = True

    def __call__(self, rgb_patch, ir_patch, velocity_features):
        return 0.5 * (float(np.var(_normalized_gray(rgb_patch))) + float(np.var(_normalized_gray(ir_patch))))


@dataclass(eq=False)
class CostGrid:
    rows: int
    cols: int
    costs: np.ndarray
    top_left: np.ndarray  # (rows, cols, 2) as (x, y)
    failures: int = 0

    @property
    def known(self):
        return np.isfinite(self.costs)


def score_grid(pairs, speed, scorer, enc: FourierEncoder, cfg: PatchGridConfig | None = None, threads=1) -> CostGrid:
    """Score every non-skipped patch; skipped or failing cells stay unknown (NaN)."""
    pairs = list(pairs)
    if cfg is not None:
        rows, cols, total = patch_count(cfg)
        if total != len(pairs):
            raise SizeMismatchError(f"{len(pairs)} patch pairs, config implies {total}")
    else:
        rows = max(p.row for p in pairs) + 1
        cols = max(p.col for p in pairs) + 1
    feats = fourier_encode(enc, speed)
    costs = np.full((rows, cols), UNKNOWN)
    top_left = np.zeros((rows, cols, 2), dtype=np.int64)
    for p in pairs:
        top_left[p.row, p.col] = p.top_left

    def one(p):
        try:
            value = float(scorer(p.rgb, p.ir, feats))
        except Exception as exc:  # scorer faults become unknown cells
            log.debug("scorer failed on cell (%d, %d): %s", p.row, p.col, exc)
            return None
        return value if math.isfinite(value) else None

    todo = [p for p in pairs if not p.skipped]
    if threads > 1 and getattr(scorer, "thread_safe", False):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, todo))
    else:
        values = [one(p) for p in todo]
    failures = 0
    for p, value in zip(todo, values):
        if value is None:
            failures += 1
        else:
            costs[p.row, p.col] = value
    if failures:
        log.warning("%d patch(es) failed to score and are marked unknown", failures)
    return CostGrid(rows, cols, costs, top_left, failures)


_STOPS = np.array([[30, 60, 220], [40, 170, 150], [250, 220, 30]], dtype=float)
UNKNOWN_COLOR = np.array([128, 128, 128], dtype=np.uint8)


def colormap_lut(n=256):
    """Blue -> teal -> yellow lookup table, shape (n, 3) uint8."""
    t = np.linspace(0.0, 1.0, n)
    pos = np.linspace(0.0, 1.0, len(_STOPS))
    lut = np.stack([np.interp(t, pos, _STOPS[:, c]) for c in range(3)], axis=-1)
    return np.round(lut).astype(np.uint8)


def cell_index_maps(cfg: PatchGridConfig):
    """Cell row/col owning each image pixel: stride-wide bands around patch centers."""
    rows, cols, _ = patch_count(cfg)
    off = (cfg.i - cfg.s) / 2.0
    col = np.clip(np.floor((np.arange(cfg.w) - off) / cfg.s), 0, cols - 1).astype(int)
    row = np.clip(np.floor((np.arange(cfg.h) - off) / cfg.s), 0, rows - 1).astype(int)
    return row, col


def render_costmap(grid: CostGrid, cfg: PatchGridConfig):
    """RGB image (h, w, 3): blue (low) to yellow (high), unknown cells gray."""
    rows, cols, _ = patch_count(cfg)
    if (grid.rows, grid.cols) != (rows, cols):
        raise SizeMismatchError("grid does not match patch config")
    lut = colormap_lut()
    known = grid.known
    cell_rgb = np.tile(UNKNOWN_COLOR, (rows, cols, 1))
    if np.any(known):
        lo, hi = float(grid.costs[known].min()), float(grid.costs[known].max())
        if hi > lo:
            idx = np.round((grid.costs[known] - lo) / (hi - lo) * (len(lut) - 1)).astype(int)
        else:
            idx = np.full(int(known.sum()), len(lut) // 2)
        cell_rgb[known] = lut[idx]
    r, c = cell_index_maps(cfg)
    return cell_rgb[r[:, None], c[None, :]]

"""2D-2D matching between camera and LiDAR intensity images, and lifting to 2D-3D.

Two sources of matches are supported: the built-in FAST-9 / oriented
binary-descriptor pipeline (:func:`detect`, :func:`match`), and match files
written by an external learned matcher (:func:`load_matches`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._pattern import PATTERN
from .cloudmap import IntensityImage, PointCloud
from .errors import CloudMapError, ImageTooSmallError, IndexOutOfRangeError, ParseError
from .geometry import Pixel

MATCH_FORMAT = "fusioncal.matches"
MATCH_VERSION = 1

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
RING = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
ARC = 9
PATCH_RADIUS = 15
BORDER = PATCH_RADIUS + 1

_PATTERN = np.array(PATTERN, dtype=float)
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    response: float = 0.0
    orientation: float = 0.0

    @property
    def position(self):
        return Pixel(self.u, self.v)


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    score: float


@dataclass(frozen=True, eq=False)
class Correspondence2D3D:
    pixel: Pixel
    point: np.ndarray


def to_gray(image):
    img = np.asarray(image)
    if img.ndim == 3:
        rgb = img[..., :3]
        # gray stored as RGB stays exact; luma weights do not sum to exactly 1 in float
        if np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 0], rgb[..., 2]):
            img = rgb[..., 0]
        else:
            img = rgb.astype(float) @ np.array([0.299, 0.587, 0.114])
    return img.astype(float)


def equalize_histogram(image):
    """Histogram equalization of an 8-bit image (NaN treated as 0)."""
    img = np.nan_to_num(np.asarray(image, dtype=float))
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    nz = cdf[cdf > 0]
    if len(nz) == 0 or cdf[-1] == nz[0]:
        return img.astype(float)
    lut = np.round((cdf - nz[0]) / (cdf[-1] - nz[0]) * 255.0)
    return np.clip(lut, 0, 255)[img]


def _fast_scores(img, threshold):
    h, w = img.shape
    r = 3
    c = img[r:h - r, r:w - r]
    ring = np.stack([img[r + dy:h - r + dy, r + dx:w - r + dx] for dx, dy in RING])
    bright = ring > c + threshold
    dark = ring < c - threshold
    corner = np.zeros(c.shape, dtype=bool)
    for mask in (bright, dark):
        ext = np.concatenate([mask, mask[: ARC - 1]])
        for s in range(len(RING)):
            corner |= np.all(ext[s:s + ARC], axis=0)
    score = np.sum(np.maximum(np.abs(ring - c) - threshold, 0.0), axis=0)
    out = np.zeros((h, w))
    out[r:h - r, r:w - r] = np.where(corner, score, 0.0)
    return out


def _orientation(img, us, vs):
    offs = np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1)
    dx, dy = np.meshgrid(offs, offs)
    disk = dx**2 + dy**2 <= PATCH_RADIUS**2
    dx, dy = dx[disk], dy[disk]
    vals = img[vs[:, None] + dy[None, :], us[:, None] + dx[None, :]]
    return np.arctan2((vals * dy).sum(axis=1), (vals * dx).sum(axis=1))


def _describe(smooth, us, vs, angles):
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]

    def sample(x, y):
        xr = np.rint(c * x - s * y).astype(np.int64)
        yr = np.rint(s * x + c * y).astype(np.int64)
        return smooth[vs[:, None] + yr, us[:, None] + xr]

    bits = sample(_PATTERN[:, 0], _PATTERN[:, 1]) < sample(_PATTERN[:, 2], _PATTERN[:, 3])
    return np.packbits(bits, axis=1)


def detect(image, max_keypoints=500, fast_threshold=20.0, equalize=False):
    """FAST-9/16 corners with intensity-centroid orientation and 256-bit descriptors.

    Parameters
    ----------
    image : array_like
        Grayscale or RGB image, 8-bit intensity range.
    max_keypoints : int
        Strongest corners kept after 3x3 non-maximum suppression.
    fast_threshold : float
        Intensity difference for a ring pixel to count as brighter/darker.
    equalize : bool
        Histogram-equalize first (used for low-contrast LiDAR intensity).

    Returns
    -------
    keypoints : list of Keypoint
        Sorted by response, descending (ties by row, then column).
    descriptors : ndarray, shape (n, 32), uint8
    """
    img = to_gray(image)
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ImageTooSmallError(f"image {img.shape[1]}x{img.shape[0]} smaller than 32x32")
    if equalize:
        img = equalize_histogram(img)
    img = np.nan_to_num(img)
    score = _fast_scores(img, float(fast_threshold))
    peak = (score > 0) & (score == ndimage.maximum_filter(score, size=3, mode="constant"))
    h, w = img.shape
    peak[:BORDER] = peak[h - BORDER:] = False
    peak[:, :BORDER] = peak[:, w - BORDER:] = False
    vs, us = np.nonzero(peak)
    resp = score[vs, us]
    order = np.lexsort((us, vs, -resp))[: int(max_keypoints)]
    vs, us, resp = vs[order], us[order], resp[order]
    if len(us) == 0:
        return [], np.zeros((0, 32), dtype=np.uint8)
    angles = _orientation(img, us, vs)
    smooth = ndimage.gaussian_filter(img, sigma=2.0, mode="nearest")
    desc = _describe(smooth, us, vs, angles)
    kps = [Keypoint(float(u), float(v), float(r), float(a)) for u, v, r, a in zip(us, vs, resp, angles)]
    return kps, desc


def hamming_table(a, b):
    """Pairwise Hamming distances between packed descriptor arrays."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1, 32)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, 32)
    out = np.empty((len(a), len(b)), dtype=np.int64)
    for i in range(0, len(a), 256):
        x = a[i:i + 256, None, :] ^ b[None, :, :]
        out[i:i + 256] = _POPCOUNT[x].sum(axis=2)
    return out


def _ratio_ok(dist, best, axis, ratio):
    n = dist.shape[axis]
    if n < 2:
        return np.ones(dist.shape[1 - axis], dtype=bool)
    second = np.partition(dist, 1, axis=axis).take(1, axis=axis)
    return best < ratio * second


def match(a, b, ratio=0.8, cross_check=True):
    """Hamming nearest neighbours with Lowe's ratio test.

    With ``cross_check`` the ratio test is applied from both sides and only
    mutual best pairs survive, which makes the result symmetric in ``a``
    and ``b``. Score is ``1 - distance / 256``.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    a = np.asarray(a, dtype=np.uint8).reshape(-1, 32)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, 32)
    if len(a) == 0 or len(b) == 0:
        return []
    dist = hamming_table(a, b)
    rows = np.arange(len(a))
    best_b = np.argmin(dist, axis=1)
    best_d = dist[rows, best_b]
    keep = _ratio_ok(dist, best_d, 1, ratio)
    if cross_check:
        best_a = np.argmin(dist, axis=0)
        col_ok = _ratio_ok(dist, dist[best_a, np.arange(len(b))], 0, ratio)
        keep &= (best_a[best_b] == rows) & col_ok[best_b]
    return [Match(int(i), int(best_b[i]), 1.0 - best_d[i] / 256.0) for i in np.flatnonzero(keep)]


def save_matches(path, keypoints_a, keypoints_b, matches, size_a, size_b):
    """Write a versioned match file (JSON).

    Schema::

        {"format": "fusioncal.matches", "version": 1,
         "image_a": {"width": W, "height": H}, "image_b": {...},
         "keypoints_a": [[u, v, response], ...], "keypoints_b": [...],
         "matches": [[index_a, index_b, score], ...]}

    By convention image ``a`` is the camera image and ``b`` the LiDAR
    intensity image.
    """
    doc = {
        "format": MATCH_FORMAT,
        "version": MATCH_VERSION,
        "image_a": {"width": int(size_a[0]), "height": int(size_a[1])},
        "image_b": {"width": int(size_b[0]), "height": int(size_b[1])},
        "keypoints_a": [[kp.u, kp.v, kp.response] for kp in keypoints_a],
        "keypoints_b": [[kp.u, kp.v, kp.response] for kp in keypoints_b],
        "matches": [[m.index_a, m.index_b, m.score] for m in matches],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _parse_keypoints(rows, size, name):
    w, h = size
    kps = []
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) < 2:
            raise ParseError(f"{name}[{i}]: expected [u, v, response]")
        u, v = float(row[0]), float(row[1])
        if not (-0.5 <= u <= w - 0.5 and -0.5 <= v <= h - 0.5):
            raise ParseError(f"{name}[{i}]: pixel ({u}, {v}) outside {w}x{h} image")
        kps.append(Keypoint(u, v, float(row[2]) if len(row) > 2 else 0.0))
    return kps


def load_matches(path):
    """Read a match file; returns ``(keypoints_a, keypoints_b, matches, sizes)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MATCH_FORMAT:
        raise ParseError(f"{path}: not a {MATCH_FORMAT} document")
    if doc.get("version") != MATCH_VERSION:
        raise ParseError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        size_a = (int(doc["image_a"]["width"]), int(doc["image_a"]["height"]))
        size_b = (int(doc["image_b"]["width"]), int(doc["image_b"]["height"]))
        kpa = _parse_keypoints(doc["keypoints_a"], size_a, "keypoints_a")
        kpb = _parse_keypoints(doc["keypoints_b"], size_b, "keypoints_b")
        raw = doc["matches"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed document ({exc})") from None
    matches = []
    for j, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != 3:
            raise ParseError(f"{path}: matches[{j}] must be [index_a, index_b, score]")
        ia, ib, score = int(row[0]), int(row[1]), float(row[2])
        if not (0 <= ia < len(kpa)) or not (0 <= ib < len(kpb)):
            raise IndexOutOfRangeError(f"{path}: matches[{j}] references ({ia}, {ib}) "
                                       f"with {len(kpa)}/{len(kpb)} keypoints")
        matches.append(Match(ia, ib, score))
    return kpa, kpb, matches, (size_a, size_b)


def lift(matches, keypoints_cam, keypoints_int, img: IntensityImage, cloud: PointCloud):
    """Resolve intensity-image keypoints to 3D points.

    ``index_a`` refers to ``keypoints_cam`` and ``index_b`` to
    ``keypoints_int``. Matches landing on holes (or outside the rendered
    view) are dropped.

    Returns
    -------
    correspondences : list of Correspondence2D3D
    dropped : int
    """
    from .cloudmap import lookup_3d

    out = []
    dropped = 0
    for m in matches:
        kc, ki = keypoints_cam[m.index_a], keypoints_int[m.index_b]
        try:
            p = lookup_3d(img, cloud, (ki.u, ki.v))
        except CloudMapError:
            dropped += 1
            continue
        out.append(Correspondence2D3D(Pixel(kc.u, kc.v), p))
    return out, dropped


def correspondence_arrays(corrs):
    """``(points (N, 3), pixels (N, 2))`` from a list of correspondences."""
    if not corrs:
        return np.zeros((0, 3)), np.zeros((0, 2))
    return (np.array([c.point for c in corrs], dtype=float),
            np.array([[c.pixel.u, c.pixel.v] for c in corrs], dtype=float))


def save_correspondences(path, corrs):
    pts, px = correspondence_arrays(corrs)
    with open(path, "w") as f:
        f.write("u,v,x,y,z\n")
        for row in np.hstack([px, pts]).tolist():
            f.write(",".join(repr(v) for v in row) + "\n")


def load_correspondences(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [Correspondence2D3D(Pixel(float(r[0]), float(r[1])), r[2:5].copy()) for r in data]

"""Pipeline configuration: one YAML (or JSON) document with per-stage sections.

Relative paths are resolved against the directory of the config file.
Command-line flags override fields through :meth:`PipelineConfig.set`.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from .calib import RansacParams
from .cloudmap import IcpParams
from .errors import ConfigError, PlaneBehindCameraError
from .geometry import CameraIntrinsics, EulerPose, RigidTransform, load_intrinsics
from .warp import PlaneModel

_MISSING = object()


class PipelineConfig:
    def __init__(self, data=None, base_dir="."):
        self.data = copy.deepcopy(data) if data else {}
        self.base_dir = Path(base_dir)

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls({}, Path.cwd())
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", "--config")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}" if mark else "?"
            raise ConfigError(f"cannot parse {path} ({where}): {exc}", "--config") from None
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", "--config")
        return cls(data, path.parent)

    def get(self, key, default=_MISSING):
        node = self.data
        for part in key.split("."):
            if isinstance(node, dict) and part in node:
                node = node[part]
            else:
                if default is _MISSING:
                    raise ConfigError("missing required field", key)
                return default
        return node

    def set(self, key, value):
        node = self.data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot set a field below a scalar", key)
        node[parts[-1]] = value

    def apply_override(self, text):
        """``section.key=value`` with the value parsed as YAML."""
        if "=" not in text:
            raise ConfigError(f"override '{text}' is not key=value", "--set")
        key, raw = text.split("=", 1)
        self.set(key.strip(), yaml.safe_load(raw))

    def resolve(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def path(self, key, must_exist=True, default=_MISSING):
        value = self.get(key, default)
        if value is None:
            return None
        p = self.resolve(value)
        if must_exist and not p.exists():
            raise ConfigError(f"file not found: {p}", key)
        return p

    def number(self, key, default=_MISSING, kind=float, minimum=None, strict=False):
        value = self.get(key, default)
        try:
            value = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"expected {kind.__name__}, got {value!r}", key) from None
        if minimum is not None and (value <= minimum if strict else value < minimum):
            raise ConfigError(f"must be {'>' if strict else '>='} {minimum}, got {value}", key)
        return value

    def intrinsics(self, camera) -> CameraIntrinsics:
        key = f"cameras.{camera}.intrinsics"
        value = self.get(key)
        try:
            if isinstance(value, dict):
                return CameraIntrinsics.from_dict(value)
            return load_intrinsics(self.path(key))
        except ConfigError as exc:
            raise ConfigError(str(exc), key) from None

    def transform(self, key, default=_MISSING) -> RigidTransform | None:
        value = self.get(key, default)
        if value is None:
            return None
        if isinstance(value, dict):
            return RigidTransform.from_dict(value)
        from .calib import read_transform
        return read_transform(self.path(key))

    def ransac(self) -> RansacParams:
        d = self.get("ransac", {}) or {}
        try:
            return RansacParams(
                max_iterations=int(d.get("max_iterations", 2000)),
                inlier_threshold=float(d.get("inlier_threshold", 2.0)),
                min_inliers=int(d.get("min_inliers", 6)),
                sample_size=int(d.get("sample_size", 6)),
                rng_seed=int(d.get("rng_seed", self.get("seed", 0))),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "ransac") from None

    def icp(self) -> IcpParams:
        d = self.get("icp", {}) or {}
        try:
            return IcpParams(
                max_iterations=int(d.get("max_iterations", 50)),
                convergence_eps=float(d.get("convergence_eps", 1e-6)),
                max_correspondence_dist=float(d.get("max_correspondence_dist", 1.0)),
                voxel_size=float(d.get("voxel_size", 0.05)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "icp") from None

    def plane(self) -> PlaneModel | None:
        d = self.get("plane", None)
        if d is None:
            return None
        try:
            return PlaneModel(np.asarray(d["normal"], dtype=float), float(d["distance"]))
        except (KeyError, TypeError, ValueError, PlaneBehindCameraError) as exc:
            raise ConfigError(f"invalid plane ({exc})", "plane") from None

    def measured(self) -> EulerPose | None:
        d = self.get("measured", None)
        if d is None:
            return None
        if not isinstance(d, dict):
            raise ConfigError("expected a mapping of x, y, z, roll, pitch, yaw", "measured")
        return EulerPose.from_dict(d)

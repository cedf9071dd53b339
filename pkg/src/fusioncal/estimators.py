"""scikit-learn style wrappers around the calibration and costmap functions.

These follow the estimator contract (constructor stores hyper-parameters
verbatim, ``fit`` sets trailing-underscore attributes and returns
``self``) so they work with ``get_params``/``set_params``/``clone``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import calib, cloudmap, costpipe
from ._validation import check_cloud, check_pixels, check_points3d, check_speeds
from .geometry import CameraIntrinsics, RigidTransform, apply, project_unchecked


class PnPCalibrator(BaseEstimator):
    """Camera-from-LiDAR pose from 3D points ``X`` and their pixels ``y``.

    Parameters
    ----------
    intrinsics : CameraIntrinsics
    max_iterations, inlier_threshold, min_inliers, sample_size :
        RANSAC settings (see :class:`fusioncal.calib.RansacParams`).
    random_state : int
        Seed of the hypothesis sampler.
    refine_max_iter, refine_tol :
        Levenberg-Marquardt budget and relative cost-change tolerance.

    Attributes
    ----------
    transform_ : RigidTransform
    inlier_mask_ : ndarray of bool
    rms_reprojection_ : float
    result_ : CalibrationResult
    """

    def __init__(self, intrinsics=None, max_iterations=2000, inlier_threshold=2.0, min_inliers=6,
                 sample_size=6, random_state=0, refine_max_iter=100, refine_tol=1e-12):
        self.intrinsics = intrinsics
        self.max_iterations = max_iterations
        self.inlier_threshold = inlier_threshold
        self.min_inliers = min_inliers
        self.sample_size = sample_size
        self.random_state = random_state
        self.refine_max_iter = refine_max_iter
        self.refine_tol = refine_tol

    def _k(self):
        if not isinstance(self.intrinsics, CameraIntrinsics):
            raise ValueError("intrinsics must be a CameraIntrinsics instance")
        return self.intrinsics

    def fit(self, X, y):
        X = check_points3d(X, min_samples=self.sample_size)
        y = check_pixels(y, len(X))
        params = calib.RansacParams(self.max_iterations, self.inlier_threshold, self.min_inliers,
                                    self.sample_size, int(self.random_state or 0))
        self.result_ = calib.ransac_calibrate(X, y, self._k(), params, self.refine_max_iter, self.refine_tol)
        self.transform_ = self.result_.transform
        self.inlier_mask_ = self.result_.inlier_mask
        self.rms_reprojection_ = self.result_.rms_reprojection
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        """Pixels of ``X`` under the fitted pose; NaN for points behind the camera."""
        check_is_fitted(self, "transform_")
        X = check_points3d(X)
        pc = apply(self.transform_, X)
        out = np.full((len(X), 2), np.nan)
        front = pc[:, 2] > 0
        out[front] = project_unchecked(self._k(), pc[front])
        return out

    def score(self, X, y):
        """Fraction of correspondences reprojecting within ``inlier_threshold``."""
        check_is_fitted(self, "transform_")
        X = check_points3d(X)
        y = check_pixels(y, len(X))
        err = calib.reprojection_errors(self.transform_, X, y, self._k())
        return float(np.mean(err < self.inlier_threshold))


class IcpRegistration(BaseEstimator):
    """Point-to-point ICP; ``fit(source, target)`` learns target_from_source."""

    def __init__(self, max_iterations=50, convergence_eps=1e-6, max_correspondence_dist=1.0,
                 voxel_size=0.05, initial=None):
        self.max_iterations = max_iterations
        self.convergence_eps = convergence_eps
        self.max_correspondence_dist = max_correspondence_dist
        self.voxel_size = voxel_size
        self.initial = initial

    def fit(self, X, y):
        source, target = check_cloud(X, "X"), check_cloud(y, "y")
        params = cloudmap.IcpParams(self.max_iterations, self.convergence_eps,
                                    self.max_correspondence_dist, self.voxel_size)
        res = cloudmap.icp_align(source, target, self.initial or RigidTransform.identity(), params)
        self.transform_ = res.transform
        self.rms_error_ = res.rms_error
        self.n_iter_ = res.iterations
        self.history_ = res.history
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return apply(self.transform_, check_points3d(X))


class FourierVelocityEncoder(TransformerMixin, BaseEstimator):
    """Speeds ``(n, d)`` to Fourier features ``(n, 2 * n_features)``."""

    def __init__(self, n_features=16, sigma=1.0, random_state=0):
        self.n_features = n_features
        self.sigma = sigma
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_speeds(X)
        self.encoder_ = costpipe.FourierEncoder(self.n_features, self.sigma, int(self.random_state or 0), X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_speeds(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return np.stack([costpipe.fourier_encode(self.encoder_, row) for row in X])


class CostGridPredictor(BaseEstimator):
    """Costmap for one co-registered pair at a given speed.

    ``predict((rgb, ir[, mask]), speed)`` returns a :class:`CostGrid`.
    Nothing is learned: ``fit`` only checks the configuration and builds
    the velocity encoder, so a trained scorer can be dropped in via
    ``scorer``.
    """

    def __init__(self, patch_size=128, stride=64, scorer=None, n_fourier=16, sigma=1.0,
                 random_state=0, max_invalid=0.10, threads=1):
        self.patch_size = patch_size
        self.stride = stride
        self.scorer = scorer
        self.n_fourier = n_fourier
        self.sigma = sigma
        self.random_state = random_state
        self.max_invalid = max_invalid
        self.threads = threads

    def fit(self, X=None, y=None):
        self.encoder_ = costpipe.FourierEncoder(self.n_fourier, self.sigma, int(self.random_state or 0))
        self.scorer_ = self.scorer if self.scorer is not None else costpipe.VarianceScorer()
        return self

    def predict(self, X, speed=0.0):
        check_is_fitted(self, "encoder_")
        rgb, ir, *rest = X
        mask = rest[0] if rest else None
        h, w = np.asarray(ir).shape[:2]
        cfg = costpipe.PatchGridConfig(w, h, self.patch_size, self.stride)
        pairs = costpipe.extract_patch_pairs(rgb, ir, cfg, mask, self.max_invalid)
        return costpipe.score_grid(pairs, speed, self.scorer_, self.encoder_, cfg, self.threads)

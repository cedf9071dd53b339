"""Input checks shared by the estimator wrappers."""

import numpy as np
from sklearn.utils.validation import check_array

from .cloudmap import PointCloud


def check_points3d(X, name="X", min_samples=1):
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n_samples, 3), got {X.shape}")
    return X


def check_pixels(y, n_samples, name="y"):
    y = check_array(y, dtype=np.float64, ensure_min_samples=1, input_name=name)
    if y.shape != (n_samples, 2):
        raise ValueError(f"{name} must have shape ({n_samples}, 2), got {y.shape}")
    return y


def check_cloud(X, name="X"):
    """Accept a PointCloud, an (n, 3) array or an (n, 4) array with intensity."""
    if isinstance(X, PointCloud):
        return X
    X = check_array(X, dtype=np.float64, input_name=name)
    if X.shape[1] == 3:
        return PointCloud(X, np.zeros(len(X)))
    if X.shape[1] == 4:
        return PointCloud(X[:, :3], X[:, 3])
    raise ValueError(f"{name} must have 3 or 4 columns, got {X.shape[1]}")


def check_speeds(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = check_array(X, dtype=np.float64, input_name=name)
    if np.any(X < 0):
        raise ValueError(f"{name} must be non-negative speeds")
    return X

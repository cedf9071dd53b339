import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fusioncal.costpipe import ConstantScorer, FourierEncoder, fourier_encode
from fusioncal.estimators import CostGridPredictor, FourierVelocityEncoder, IcpRegistration, PnPCalibrator
from fusioncal.geometry import CameraIntrinsics, EulerPose, apply, compose, from_euler, invert, rotation_angle_deg
from fusioncal.synthetic import corner_cloud, frustum_correspondences, random_pose

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def test_pnp_params_round_trip_through_clone():
    est = PnPCalibrator(K, max_iterations=100, random_state=3)
    copy = clone(est)
    assert copy.get_params() == est.get_params()
    assert not hasattr(copy, "transform_")
    copy.set_params(inlier_threshold=1.5)
    assert copy.inlier_threshold == 1.5 and est.inlier_threshold == 2.0


def test_pnp_fit_predict_score(rng):
    truth = random_pose(rng, 30.0, 0.5)
    w, px = frustum_correspondences(rng, K, truth, 80, noise=0.3, n_outliers=20)
    est = PnPCalibrator(K, max_iterations=500).fit(w, px)
    e = compose(est.transform_, invert(truth))
    assert np.linalg.norm(e.translation) < 0.01 and rotation_angle_deg(e.rotation_matrix) < 0.2
    pred = est.predict(w[:80])
    assert np.abs(pred - px[:80]).max() < 2.0
    assert 0.75 <= est.score(w, px) <= 0.85
    assert est.inlier_mask_.shape == (100,)


def test_pnp_predict_behind_camera_is_nan(rng):
    w, px = frustum_correspondences(rng, K, random_pose(rng, 10.0, 0.1), 30)
    est = PnPCalibrator(K, max_iterations=50).fit(w, px)
    behind = apply(invert(est.transform_), np.array([[0.0, 0.0, -1.0]]))
    assert np.isnan(est.predict(behind)).all()


def test_pnp_validation(rng):
    with pytest.raises(NotFittedError):
        PnPCalibrator(K).predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        PnPCalibrator(None).fit(*frustum_correspondences(rng, K, random_pose(rng, 5, 0.1), 10))
    with pytest.raises(ValueError):
        PnPCalibrator(K).fit(np.zeros((10, 2)), np.zeros((10, 2)))
    with pytest.raises(ValueError):
        PnPCalibrator(K).fit(np.zeros((10, 3)), np.zeros((9, 2)))


def test_icp_registration(rng):
    cloud = corner_cloud(rng, 1000)
    truth = from_euler(EulerPose(0.1, -0.05, 0.05, 1.0, -2.0, 2.0))
    moved = cloud.transformed(invert(truth))
    est = IcpRegistration(max_iterations=200, convergence_eps=1e-10, max_correspondence_dist=10.0,
                          voxel_size=1e-4).fit(moved, cloud)
    assert rotation_angle_deg(compose(est.transform_, invert(truth)).rotation_matrix) < 0.05
    assert np.abs(est.transform(moved.points) - cloud.points).max() < 1e-3
    # one entry per pass including the converged check, plus the final value
    assert len(est.history_) == est.n_iter_ + 2


def test_icp_accepts_arrays_with_intensity(rng):
    pts = corner_cloud(rng, 300).points
    est = IcpRegistration(voxel_size=1e-4).fit(np.column_stack([pts, np.ones(len(pts))]), pts)
    assert est.rms_error_ < 1e-9
    with pytest.raises(ValueError):
        IcpRegistration().fit(np.zeros((5, 2)), pts)


def test_fourier_encoder_matches_functional():
    speeds = np.array([0.0, 0.5, 1.5, 4.0])
    enc = FourierVelocityEncoder(8, 2.0, 5).fit(speeds)
    out = enc.transform(speeds)
    ref = FourierEncoder(8, 2.0, 5)
    assert out.shape == (4, 16)
    assert all(np.array_equal(out[i], fourier_encode(ref, v)) for i, v in enumerate(speeds))
    assert np.array_equal(enc.fit_transform(speeds), out)


def test_fourier_encoder_checks():
    with pytest.raises(ValueError):
        FourierVelocityEncoder().fit([-1.0])
    enc = FourierVelocityEncoder().fit(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        enc.transform(np.zeros((3, 1)))


def test_cost_grid_predictor(rng):
    img = np.full((128, 256), 128, dtype=np.uint8)
    img[:, 128:] = rng.integers(0, 256, (128, 128), dtype=np.uint8)
    grid = CostGridPredictor(patch_size=64, stride=64).fit().predict((img, img), speed=1.0)
    assert (grid.rows, grid.cols) == (2, 4)
    assert grid.costs[:, 2:].min() > grid.costs[:, :2].max()
    const = CostGridPredictor(64, 64, scorer=ConstantScorer(4.0)).fit()
    mask = np.ones_like(img, bool)
    mask[:64, :64] = False
    g = const.predict((img, img, mask))
    assert np.isnan(g.costs[0, 0]) and np.all(g.costs[g.known] == 4.0)
    assert clone(const).get_params()["scorer"].value == 4.0

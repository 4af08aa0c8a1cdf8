import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatlab import autodiff as ad
from splatlab.geometry import Camera, Intrinsics, Pose, rotation_from_axis_angle, simple_camera, unproject
from splatlab.rasterizer import render
from splatlab.splat import (
    SCALE_FLOOR,
    Gaussian,
    GaussianCloud,
    SplatError,
    build_covariance,
    lift_predictions,
    raw_from_values,
)

from conftest import central_diff, random_cloud


def test_covariance_identity_cases():
    assert np.allclose(build_covariance([1, 1, 1], [1, 0, 0, 0]), np.eye(3))
    assert np.allclose(build_covariance([2, 1, 1], [1, 0, 0, 0]), np.diag([4, 1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_covariance_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.01, 3, 3)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()  # scipy is (x, y, z, w)
    oracle = R @ np.diag(s ** 2) @ R.T
    cov = build_covariance(s, q)
    assert np.allclose(cov, oracle, atol=1e-12)
    assert np.allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s ** 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_covariance_psd_above_floor(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(SCALE_FLOOR, 1e-3, 3)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    ev = np.linalg.eigvalsh(build_covariance(s, q))
    assert ev.min() >= SCALE_FLOOR ** 2 * (1 - 1e-6)


def test_gaussian_invariants():
    ok = dict(mu=np.zeros(3), alpha=0.5, scale=np.ones(3), rot=np.array([1.0, 0, 0, 0]), color=np.full(3, 0.5))
    Gaussian(**ok)
    for bad in (dict(alpha=1.5), dict(scale=np.array([1, 1, 0.0])), dict(rot=np.array([1.0, 1, 0, 0])),
                dict(color=np.array([0, 0, 2.0]))):
        with pytest.raises(SplatError):
            Gaussian(**{**ok, **bad})


def test_lift_single_pixel():
    cam = Camera(Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1), Pose())
    raw = raw_from_values(np.full((1, 1), 2.0), cam)
    res = lift_predictions(ad.Tensor(raw), cam)
    assert len(res.cloud) == 1
    assert np.allclose(res.cloud.mu.data[0], [0, 0, 2], atol=1e-12)


def test_lift_cardinality_and_centers():
    cam = simple_camera(4, 4)
    depth = np.arange(16, dtype=float).reshape(4, 4) + 2
    res = lift_predictions(ad.Tensor(raw_from_values(depth, cam)), cam)
    assert len(res.cloud) == 16
    expected = unproject(cam, cam.pixel_centers(), depth)
    assert np.allclose(res.mu_grid.data, expected, atol=1e-12)
    res.cloud.validate()


def test_lift_rotated_camera_centers():
    R = rotation_from_axis_angle([0.2, 1, 0.1], 0.5)
    cam = Camera(Intrinsics(5, 6, 2, 1.5, 4, 3), Pose(R, np.array([0.1, 0.2, 0.3])))
    depth = np.full((3, 4), 3.5)
    res = lift_predictions(ad.Tensor(raw_from_values(depth, cam)), cam)
    assert np.allclose(res.mu_grid.data, unproject(cam, cam.pixel_centers(), depth), atol=1e-12)


def test_lift_dimension_mismatch():
    with pytest.raises(SplatError):
        lift_predictions(ad.Tensor(np.zeros((3, 4, 14))), simple_camera(4, 4))


def test_zero_alpha_renders_no_weight():
    cam = simple_camera(8, 8)
    raw = raw_from_values(np.full((8, 8), 3.0), cam)
    raw[..., 3] = -1e4  # sigmoid -> 0
    cloud = lift_predictions(ad.Tensor(raw), cam).cloud
    assert np.all(render(cloud, cam, "weight") == 0)


def test_lift_gradients_match_finite_differences(rng):
    cam = simple_camera(3, 3)
    raw = raw_from_values(rng.uniform(2, 5, (3, 3)), cam) + rng.normal(scale=0.3, size=(3, 3, 14))
    weights = [rng.normal(size=s) for s in ((9, 3), (9,), (9, 3), (9, 4), (9, 3))]

    def loss_value(r):
        c = lift_predictions(ad.Tensor(r), cam).cloud
        return sum(float((t.data * w).sum()) for t, w in zip(c.tensors(), weights))

    x = ad.Tensor(raw.copy(), requires_grad=True)
    c = lift_predictions(x, cam).cloud
    total = None
    for t, w in zip(c.tensors(), weights):
        term = ad.tsum(t * w)
        total = term if total is None else total + term
    total.backward()
    fd = central_diff(lambda: loss_value(raw), raw)
    assert np.allclose(x.grad, fd, rtol=1e-5, atol=1e-6)


def test_depth_raw_gradient_is_local():
    cam = simple_camera(4, 4)
    raw = raw_from_values(np.full((4, 4), 3.0), cam)
    base = lift_predictions(ad.Tensor(raw), cam).mu_grid.data
    raw2 = raw.copy()
    raw2[1, 2, 0] += 0.05
    moved = lift_predictions(ad.Tensor(raw2), cam).mu_grid.data
    changed = np.any(moved != base, axis=-1)
    assert changed[1, 2] and changed.sum() == 1


def test_cloud_dump_roundtrip(tmp_path, rng):
    cloud = random_cloud(rng, 7, simple_camera(8, 8))
    buf = cloud.to_bytes()
    assert len(buf) == 8 + 7 * 14 * 4
    assert int.from_bytes(buf[:8], "little") == 7
    path = tmp_path / "c.bin"
    cloud.save(path)
    back = GaussianCloud.load(path)
    for a, b in zip(cloud.arrays(), back.arrays()):
        assert np.array_equal(a.astype(np.float32), b.astype(np.float32))


def test_cloud_dump_rejects_truncation(rng):
    buf = random_cloud(rng, 3, simple_camera(8, 8)).to_bytes()
    with pytest.raises(SplatError):
        GaussianCloud.from_bytes(buf[:-4])


def test_cloud_container_helpers(rng):
    cloud = random_cloud(rng, 5, simple_camera(8, 8))
    assert len(GaussianCloud.concat([cloud, cloud])) == 10
    assert len(GaussianCloud.empty()) == 0
    g = cloud[2]
    assert isinstance(g, Gaussian) and np.allclose(g.mu, cloud.mu.data[2])
    assert len(GaussianCloud.from_gaussians(list(cloud))) == 5
    assert np.all(cloud.recolor(1.0).color.data == 1.0)
    with pytest.raises(SplatError):
        GaussianCloud(np.zeros((2, 3)), np.zeros(3), np.ones((2, 3)), np.ones((2, 4)), np.zeros((2, 3)))

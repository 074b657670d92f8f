"""Perspective projection and camera serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadfit.camera import MIN_DEPTH, Camera, project, project_jacobian
from quadfit.errors import ParseError, ValidationError


def test_default_intrinsics_matrix():
    K = Camera().intrinsics()
    want = np.array([
        [1000.0, 0.0, 256.0],
        [0.0, 1000.0, 256.0],
        [0.0, 0.0, 1.0],
    ])
    assert np.array_equal(K, want)


def test_intrinsics_center_follows_image_size():
    assert Camera(focal=1.0, image_size=(2, 2)).center == (1.0, 1.0)
    assert Camera(image_size=(640, 480)).center == (320.0, 240.0)
    assert Camera(principal_point=(10.0, 20.0)).center == (10.0, 20.0)


def test_project_centered_point():
    px, depth, ok = project(np.zeros((1, 3)), Camera(translation=(0.0, 0.0, 5.0)))
    assert ok.all()
    assert np.array_equal(px[0], [256.0, 256.0])
    assert depth[0] == 5.0


def test_project_offset_point():
    px, depth, ok = project(
        np.array([[0.1, -0.2, 0.0]]), Camera(translation=(0.0, 0.0, 5.0))
    )
    assert ok.all()
    # f * 0.1 / 5 + 256 and f * -0.2 / 5 + 256 up to division rounding.
    assert np.allclose(px[0], [276.0, 216.0], atol=1e-9)
    assert depth[0] == 5.0


def test_project_behind_camera_flags_and_nans():
    pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, -1.0], [1.0, 1.0, 0.0]])
    px, depth, ok = project(pts, Camera())
    assert ok.tolist() == [True, False, False]
    assert np.isfinite(px[0]).all()
    assert np.isnan(px[1]).all() and np.isnan(px[2]).all()
    assert depth[1] == -1.0  # depths reported even when invalid


def test_project_depth_scale_invariance():
    rng = np.random.default_rng(3)
    cam = Camera()
    pts = rng.normal(size=(20, 3)) + np.array([0.0, 0.0, 6.0])
    base, _, ok = project(pts, cam)
    assert ok.all()
    for s in (2.0, 0.5, 10.0):
        scaled, _, ok2 = project(pts * s, cam)
        assert ok2.all()
        assert np.allclose(scaled, base, atol=1e-9)


@given(z=st.floats(min_value=1e-3, max_value=1e6))
def test_optical_axis_projects_to_principal_point(z):
    px, _, ok = project(np.array([[0.0, 0.0, z]]), Camera())
    assert ok[0]
    assert np.allclose(px[0], [256.0, 256.0], atol=1e-9)


def test_project_shape_errors():
    with pytest.raises(ValueError):
        project(np.zeros((4, 2)), Camera())
    with pytest.raises(ValueError):
        project(np.zeros((2, 2, 3)), Camera())


def test_single_point_promoted_to_batch():
    px, depth, ok = project(np.array([0.0, 0.0, 4.0]), Camera())
    assert px.shape == (1, 2) and depth.shape == (1,) and ok.shape == (1,)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(11)
    cam = Camera(translation=(0.1, -0.3, 6.0))
    pts = rng.normal(scale=0.5, size=(30, 3))
    jac = project_jacobian(pts, cam)
    assert jac.shape == (30, 2, 3)
    h = 1e-6
    for i in range(len(pts)):
        fd = np.empty((2, 3))
        for k in range(3):
            lo, hi = pts[i].copy(), pts[i].copy()
            lo[k] -= h
            hi[k] += h
            plus, _, _ = project(hi[None], cam)
            minus, _, _ = project(lo[None], cam)
            fd[:, k] = (plus[0] - minus[0]) / (2 * h)
        assert np.allclose(jac[i], fd, rtol=1e-6, atol=1e-6)


def test_jacobian_zero_behind_camera():
    pts = np.array([[0.0, 0.0, -2.0], [0.0, 0.0, 3.0]])
    jac = project_jacobian(pts, Camera())
    assert np.array_equal(jac[0], np.zeros((2, 3)))
    assert jac[1, 0, 0] != 0.0


def test_jacobian_is_translation_jacobian():
    # Point and camera translation enter the projection additively.
    pts = np.array([[0.2, 0.1, 4.0]])
    cam = Camera(translation=(0.0, 0.0, 2.0))
    jac = project_jacobian(pts, cam)
    h = 1e-6
    fd = np.empty((2, 3))
    for k in range(3):
        tp = np.zeros(3)
        tp[k] = h
        plus, _, _ = project(pts, Camera(translation=cam.translation + tp))
        minus, _, _ = project(pts, Camera(translation=cam.translation - tp))
        fd[:, k] = (plus[0] - minus[0]) / (2 * h)
    assert np.allclose(jac[0], fd, rtol=1e-6, atol=1e-6)


def test_depth_cutoff_boundary():
    eps = np.array([[0.0, 0.0, MIN_DEPTH]])
    _, _, ok = project(eps, Camera())
    assert not ok[0]
    _, _, ok = project(eps * 2, Camera())
    assert ok[0]


def test_dict_round_trip():
    cam = Camera(focal=750.0, image_size=(320, 240), translation=(1.0, -2.0, 3.0),
                 principal_point=(100.0, 120.0))
    back = Camera.from_dict(cam.to_dict())
    assert back.focal == cam.focal
    assert back.image_size == cam.image_size
    assert np.array_equal(back.translation, cam.translation)
    assert back.principal_point == cam.principal_point
    plain = Camera.from_dict(Camera().to_dict())
    assert plain.principal_point is None


def test_from_dict_malformed():
    with pytest.raises(ParseError):
        Camera.from_dict({"focal": 100.0})
    with pytest.raises(ParseError):
        Camera.from_dict({"focal": 100.0, "image_size": 512, "translation": [0, 0, 0]})


def test_constructor_validation():
    with pytest.raises(ValidationError):
        Camera(focal=0.0)
    with pytest.raises(ValidationError):
        Camera(focal=-10.0)
    with pytest.raises(ValidationError):
        Camera(image_size=(0, 512))
    with pytest.raises(ValidationError):
        Camera(translation=(1.0, 2.0))


@settings(max_examples=25)
@given(
    x=st.floats(-2, 2), y=st.floats(-2, 2), z=st.floats(0.5, 20),
    f=st.floats(10, 5000),
)
def test_projection_matches_intrinsics_homogeneous(x, y, z, f):
    cam = Camera(focal=f)
    px, _, ok = project(np.array([[x, y, z]]), cam)
    assert ok[0]
    hom = cam.intrinsics() @ np.array([x, y, z])
    assert np.allclose(px[0], hom[:2] / hom[2], rtol=1e-12, atol=1e-9)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdgs.io import scene_from_bytes, scene_to_bytes
from cdgs.rasterizer import render
from cdgs.scene import (Camera, ChunkedScene, DynamicGaussian, MotionModel, Scene, compose,
                        param_count_per_gaussian, validate_scene)
from cdgs.synthetic import random_scene, ring_cameras


def gaussian(C=5, K=16, rot0=(0, 0, 0, 1)):
    rot = np.zeros((4, 2))
    rot[:, 0] = rot0
    return DynamicGaussian(np.zeros((3, C)), rot, np.zeros(3), np.zeros((3, K)), 0.0)


@pytest.mark.parametrize("model,k,expected", [
    (MotionModel.fourier(2), 3, 75),
    (MotionModel.fourier(5), 3, 93),
    (MotionModel.polynomial(1), 0, 21),
    (MotionModel.spline(5), 3, 3 * 5 + 8 + 3 + 48 + 1),
    (MotionModel.fourier(5, time_varying_scale=True), 3, 96),
])
def test_param_count(model, k, expected):
    # oracle: sum of DynamicGaussian field sizes
    K = (k + 1) ** 2
    by_hand = 3 * model.n_coeffs + 8 + 3 + 3 * K + 1 + (3 if model.time_varying_scale else 0)
    assert param_count_per_gaussian(model, k) == expected == by_hand


def test_param_count_independent_of_sequence_length():
    # no field of the scene depends on T
    m = MotionModel.fourier(5)
    assert param_count_per_gaussian(m, 3) == param_count_per_gaussian(m, 3)
    s = random_scene(np.random.default_rng(0), 3, m, 3)
    assert all(getattr(s, f).shape[0] == 3 for f in Scene.FIELDS)


@pytest.mark.parametrize("kw", [dict(kind="fourier", order=0), dict(kind="polynomial", order=0),
                                dict(kind="spline", order=1), dict(kind="wavelet", order=2)])
def test_motion_model_rejects_bad_orders(kw):
    with pytest.raises(ValueError):
        MotionModel(**kw)


def test_coefficient_counts():
    assert MotionModel.fourier(3).n_coeffs == 7
    assert MotionModel.polynomial(3).n_coeffs == 4
    assert MotionModel.spline(6).n_coeffs == 6


def test_validate_zero_rotation_intercept():
    m = MotionModel.fourier(2)
    s = Scene.from_gaussians(m, 3, [gaussian()])
    s.rot[0, :, 0] = 0.0
    v = validate_scene(s)
    assert len(v) == 1 and v[0].index == 0 and "rotation" in v[0].message


def test_validate_empty_scene_ok_and_renders_background():
    s = Scene.empty(MotionModel.fourier(2), 3)
    assert validate_scene(s) == []
    cam = ring_cameras(1, size=16)[0]
    out = render(s, cam, 0.3)
    assert not out.color.any() and not out.alpha.any()


def test_from_gaussians_reports_model_mismatch():
    with pytest.raises(ValueError, match="model mismatch"):
        Scene.from_gaussians(MotionModel.fourier(2), 3, [gaussian(C=5), gaussian(C=3)])


def test_validate_scene_reports_model_mismatch():
    s = Scene.from_gaussians(MotionModel.fourier(2), 3, [gaussian()])
    s.center = np.zeros((1, 3, 3))
    assert any("model mismatch" in v.message for v in validate_scene(s))


def test_scene_invariants_time_range_extent():
    s = Scene.empty(MotionModel.fourier(1), 0, time_range=(0.5, 0.5))
    assert any("time_range" in v.message for v in validate_scene(s))
    s = Scene.empty(MotionModel.fourier(1), 0, extent=0.0)
    assert any("extent" in v.message for v in validate_scene(s))


def test_camera_invariants():
    with pytest.raises(ValueError):
        Camera(8, 8, 0.0, 1.0, 4, 4)
    W = np.eye(4)
    W[0, 0] = 1.001
    with pytest.raises(ValueError):
        Camera(8, 8, 1.0, 1.0, 4, 4, W)
    W = np.eye(4)
    W[0, 0] = 1 + 2e-6  # within tolerance
    Camera(8, 8, 1.0, 1.0, 4, 4, W)


def test_chunked_scene_lookup_half_open():
    a = Scene.empty(MotionModel.fourier(1), 0)
    b = Scene.empty(MotionModel.fourier(1), 0)
    cs = ChunkedScene([(0.0, 0.5, a), (0.5, 1.0, b)])
    assert cs.locate(0.5)[0] is b
    assert cs.locate(0.25) == (a, 0.5, 2.0)
    with pytest.raises(ValueError):
        cs.locate(1.5)
    with pytest.raises(ValueError):
        ChunkedScene([(0.0, 0.6, a), (0.5, 1.0, b)])


# --------------------------------------------------------------- compose

def test_compose_identity_counts_and_superposes():
    rng = np.random.default_rng(1)
    m = MotionModel.fourier(2)
    a, b = random_scene(rng, 3, m, 1), random_scene(rng, 4, m, 1)
    c = compose(a, b)
    assert len(c) == 7
    np.testing.assert_array_equal(c.center[3:], b.center)
    np.testing.assert_array_equal(c.sh[3:], b.sh)


def test_compose_translation_moves_intercepts_only():
    rng = np.random.default_rng(2)
    m = MotionModel.fourier(2)
    a, b = random_scene(rng, 2, m, 2), random_scene(rng, 3, m, 2)
    T = np.eye(4)
    T[0, 3] = 1.0
    c = compose(a, b, T)
    np.testing.assert_allclose(c.center[2:, 0, 0], b.center[:, 0, 0] + 1.0, atol=1e-12)
    np.testing.assert_allclose(c.center[2:, :, 1:], b.center[:, :, 1:], atol=1e-12)
    np.testing.assert_allclose(c.center[2:, 1:, 0], b.center[:, 1:, 0], atol=1e-12)


def test_compose_mismatch_and_nonrigid_errors():
    m = MotionModel.fourier(2)
    a = Scene.empty(m, 3)
    with pytest.raises(ValueError, match="model mismatch"):
        compose(a, Scene.empty(m, 2))
    with pytest.raises(ValueError, match="model mismatch"):
        compose(a, Scene.empty(MotionModel.fourier(3), 3))
    with pytest.raises(ValueError, match="non-rigid"):
        compose(a, Scene.empty(m, 3), np.diag([1.0, 2.0, 1.0, 1.0]))
    with pytest.raises(ValueError, match="non-rigid"):
        compose(a, Scene.empty(m, 3), np.diag([-1.0, 1.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        compose(a, Scene.empty(m, 3), time_scale=2.0)


def test_compose_with_empty_renders_identically():
    rng = np.random.default_rng(3)
    m = MotionModel.fourier(2)
    a = random_scene(rng, 6, m, 2)
    c = compose(a, Scene.empty(m, 2))
    cam = ring_cameras(3, size=24)[1]
    np.testing.assert_array_equal(render(a, cam, 0.4).image, render(c, cam, 0.4).image)


def test_compose_rigid_motion_matches_transformed_render():
    # rotating the inserted scene and the camera together leaves the image unchanged
    rng = np.random.default_rng(4)
    m = MotionModel.fourier(1)
    b = random_scene(rng, 5, m, 2)
    from scipy.spatial.transform import Rotation
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
    T[:3, 3] = [0.3, -0.2, 0.1]
    moved = compose(Scene.empty(m, 2), b, T)
    cam = ring_cameras(1, size=32)[0]
    cam2 = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
                  cam.world_to_camera @ np.linalg.inv(T))
    for t in (0.0, 0.3):
        np.testing.assert_allclose(render(moved, cam2, t).image, render(b, cam, t).image, atol=1e-6)


@pytest.mark.parametrize("model", [MotionModel.fourier(2), MotionModel.polynomial(3)])
def test_compose_time_shift_is_exact(model):
    from cdgs.motion import scene_centers
    rng = np.random.default_rng(5)
    b = random_scene(rng, 4, model, 0)
    c = compose(Scene.empty(model, 0), b, time_shift=0.15)
    for t in (0.0, 0.3, 0.7):
        np.testing.assert_allclose(scene_centers(c, t), scene_centers(b, t + 0.15), atol=1e-12)


def test_compose_spline_time_shift_rejected():
    m = MotionModel.spline(4)
    with pytest.raises(ValueError):
        compose(Scene.empty(m, 0), random_scene(np.random.default_rng(0), 2, m, 0), time_shift=0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 6), st.sampled_from([0, 1, 3]))
def test_validate_roundtrip_property(seed, n, k):
    s = random_scene(np.random.default_rng(seed), n, MotionModel.fourier(2), k)
    assert validate_scene(scene_from_bytes(scene_to_bytes(s))) == validate_scene(s) == []

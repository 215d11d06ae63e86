import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from cdgs.motion import (DegenerateRotationError, basis, center_coeff_gradient, eval_center,
                         eval_rotation, eval_scale, scene_centers, scene_flow_delta)
from cdgs.scene import DynamicGaussian, MotionModel


def g_with(center, rot=None, log_scale=(0, 0, 0), slope=(0, 0, 0)):
    if rot is None:
        rot = np.zeros((4, 2))
        rot[3, 0] = 1
    return DynamicGaussian(np.asarray(center, float), np.asarray(rot, float), np.asarray(log_scale, float),
                           np.zeros((3, 1)), 0.0, np.asarray(slope, float))


@pytest.mark.parametrize("model,t,expected", [
    (MotionModel.fourier(1), 0.0, [1, 0, 1]),
    (MotionModel.fourier(1), 0.25, [1, 1, 0]),
    (MotionModel.polynomial(2), 0.5, [1, 0.5, 0.25]),
    (MotionModel.polynomial(1), 0.3, [1, 0.3]),
])
def test_basis_examples(model, t, expected):
    np.testing.assert_allclose(basis(model, t), expected, atol=1e-15)
    np.testing.assert_allclose(center_coeff_gradient(model, t), expected, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([MotionModel.fourier(3), MotionModel.polynomial(4), MotionModel.spline(2),
                        MotionModel.spline(6)]), st.floats(-0.5, 1.5))
def test_basis_matches_oracle(model, t):
    np.testing.assert_allclose(basis(model, t), oracle.basis(model, t), atol=1e-12)


def test_leading_basis_entry_is_one():
    for m in (MotionModel.fourier(4), MotionModel.polynomial(3)):
        for t in np.linspace(0, 1, 7):
            assert basis(m, t)[0] == 1.0


def test_spline_partition_of_unity_and_interpolation():
    m = MotionModel.spline(5)
    for t in np.linspace(-0.2, 1.2, 29):
        assert abs(basis(m, t).sum() - 1) < 1e-12
    # Catmull-Rom interpolates its control points at the knots
    for i in range(5):
        e = np.zeros(5)
        e[i] = 1
        np.testing.assert_allclose(basis(m, i / 4), e, atol=1e-12)


def test_eval_center_examples():
    c = np.zeros((3, 5))
    c[0, 0] = 2
    for t in (0, 0.3, 0.9):
        np.testing.assert_array_equal(eval_center(g_with(c), MotionModel.fourier(2), t), [2, 0, 0])
    c = np.zeros((3, 3))
    c[0, 0] = c[0, 1] = 1
    np.testing.assert_allclose(eval_center(g_with(c), MotionModel.fourier(1), 0.25), [2, 0, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1))
def test_fourier_periodicity_and_linearity(seed, t):
    rng = np.random.default_rng(seed)
    m = MotionModel.fourier(2)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    assert np.abs(eval_center(g_with(a), m, t) - eval_center(g_with(a), m, t + 1)).max() < 1e-9
    np.testing.assert_allclose(eval_center(g_with(a + b), m, t),
                               eval_center(g_with(a), m, t) + eval_center(g_with(b), m, t), atol=1e-12)


def test_center_gradient_matches_fd():
    rng = np.random.default_rng(0)
    for m in (MotionModel.fourier(3), MotionModel.polynomial(3), MotionModel.spline(5)):
        c = rng.normal(size=(3, m.n_coeffs))
        t = 0.37
        g = center_coeff_gradient(m, t)
        fd = oracle.central_fd(lambda: eval_center(g_with(c), m, t)[0], c, h=1e-5)[0]
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-10)


def test_eval_rotation_examples():
    rot = np.zeros((4, 2))
    rot[3, 0] = 1
    for t in (0, 0.5, 1):
        np.testing.assert_array_equal(eval_rotation(g_with(np.zeros((3, 1)), rot), t), [0, 0, 0, 1])
    rot[3, 0] = 2
    np.testing.assert_array_equal(eval_rotation(g_with(np.zeros((3, 1)), rot), 0.3), [0, 0, 0, 1])
    rot = np.zeros((4, 2))
    rot[3, 0] = 1
    rot[2, 1] = 2
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(eval_rotation(g_with(np.zeros((3, 1)), rot), 0.5), [0, 0, s, s], atol=1e-15)


def test_eval_rotation_degenerate():
    rot = np.zeros((4, 2))
    rot[3, 0] = 1
    rot[3, 1] = -2
    with pytest.raises(DegenerateRotationError) as e:
        eval_rotation(g_with(np.zeros((3, 1)), rot), 0.5, index=7)
    assert e.value.index == 7 and e.value.t == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1))
def test_rotation_unit_norm(seed, t):
    rot = np.random.default_rng(seed).normal(size=(4, 2))
    q = eval_rotation(g_with(np.zeros((3, 1)), rot), t)
    assert abs(np.linalg.norm(q) - 1) < 1e-9


def test_eval_scale_examples():
    static = MotionModel.fourier(1)
    tvs = MotionModel.fourier(1, time_varying_scale=True)
    np.testing.assert_array_equal(eval_scale(g_with(np.zeros((3, 3))), static, 0.7), [1, 1, 1])
    g = g_with(np.zeros((3, 3)), slope=(np.log(2), 0, 0))
    np.testing.assert_allclose(eval_scale(g, tvs, 1.0), [2, 1, 1])
    assert not np.allclose(eval_scale(g, static, 1.0), [2, 1, 1])  # slope ignored when static
    g0 = g_with(np.zeros((3, 3)), log_scale=(0.1, -0.2, 0.3))
    for t in (0, 0.5, 1):
        np.testing.assert_array_equal(eval_scale(g0, tvs, t), eval_scale(g0, static, t))


def test_scene_flow_delta_examples():
    m = MotionModel.fourier(2)
    fwd, bwd = scene_flow_delta(g_with(np.zeros((3, 5))), m, 0.3, 0.05)
    assert not fwd.any() and not bwd.any()
    c = np.zeros((3, 2))
    c[0, 1] = 1  # x(t) = t
    fwd, bwd = scene_flow_delta(g_with(c), MotionModel.polynomial(1), 0.4, 0.05)
    assert fwd[0] == pytest.approx(0.05, abs=1e-15) and bwd[0] == pytest.approx(0.05, abs=1e-15)
    c = np.random.default_rng(0).normal(size=(3, 3))
    m1 = MotionModel.fourier(1)
    fwd, bwd = scene_flow_delta(g_with(c), m1, 0.2, 0.1)
    np.testing.assert_allclose(fwd, eval_center(g_with(c), m1, 0.3) - eval_center(g_with(c), m1, 0.2), atol=1e-14)
    np.testing.assert_allclose(bwd, eval_center(g_with(c), m1, 0.2) - eval_center(g_with(c), m1, 0.1), atol=1e-14)


def test_vectorized_centers_match_single():
    from cdgs.synthetic import random_scene
    s = random_scene(np.random.default_rng(0), 5, MotionModel.fourier(3), 0)
    for i, g in enumerate(s.gaussians):
        np.testing.assert_allclose(scene_centers(s, 0.6)[i], eval_center(g, s.model, 0.6), atol=1e-14)

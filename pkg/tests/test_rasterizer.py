import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from cdgs.projection import SH_C0
from cdgs.rasterizer import ALPHA_MAX, render, render_chunked, render_color, render_flow, sort_splats
from cdgs.scene import Camera, ChunkedScene, MotionModel, Scene
from cdgs.synthetic import random_scene, ring_cameras


def cam(size=32, fx=40.0):
    return Camera(size, size, fx, fx, size / 2, size / 2)


def flat_scene(specs, model=None, sh_degree=0):
    """Static Gaussians from (position, scale, rgb, opacity) tuples."""
    model = model or MotionModel.fourier(1)
    n = len(specs)
    s = Scene.empty(model, sh_degree)
    C = model.n_coeffs
    center = np.zeros((n, 3, C))
    rot = np.zeros((n, 4, 2))
    rot[:, 3, 0] = 1
    sh = np.zeros((n, 3, (sh_degree + 1) ** 2))
    logit = np.zeros(n)
    log_scale = np.zeros((n, 3))
    for i, (p, sc, rgb, op) in enumerate(specs):
        center[i, :, 0] = p
        log_scale[i] = np.log(sc)
        sh[i, :, 0] = (np.asarray(rgb, float) - 0.5) / SH_C0
        logit[i] = np.log(op / (1 - op))
    s.center, s.rot, s.log_scale, s.scale_slope, s.sh, s.opacity_logit = (
        center, rot, log_scale, np.zeros((n, 3)), sh, logit)
    return s


def test_sort_examples():
    np.testing.assert_array_equal(sort_splats(np.array([3.0, 1.0, 2.0])), [1, 2, 0])
    order = sort_splats(np.array([1.0, 1.0]), np.array([5, 2]))
    np.testing.assert_array_equal(np.array([5, 2])[order], [2, 5])
    d = np.array([0.5, 1.0, 1.0, 2.0])
    np.testing.assert_array_equal(sort_splats(d), np.arange(4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=30))
def test_sort_matches_python_sorted(depths):
    d = np.array(depths, float)
    expected = sorted(range(len(d)), key=lambda i: (d[i], i))
    np.testing.assert_array_equal(sort_splats(d), expected)


def test_empty_scene():
    out = render_color(Scene.empty(MotionModel.fourier(2), 1), cam(), 0.5)
    assert not out.color.any() and not out.alpha.any() and not out.per_pixel_contrib_count.any()


def test_huge_opaque_gaussian_gives_099_c():
    c = np.array([0.2, 0.6, 0.9])
    s = flat_scene([((0, 0, 5), 50.0, c, 0.999999)])
    out = render_color(s, cam(), 0.0)
    np.testing.assert_allclose(out.color, np.broadcast_to(ALPHA_MAX * c, out.color.shape), atol=1e-9)
    np.testing.assert_allclose(out.alpha, 0.99, atol=1e-9)


def test_two_half_alpha_splats_blend_to_half():
    # opacity 0.5 and a footprint so wide that exp(-d^2/2) == 1 to double precision at the center pixel
    s = flat_scene([((0, 0, 2), 1e4, (1, 1, 1), 0.5), ((0, 0, 4), 1e4, (0, 0, 0), 0.5)])
    c = Camera(2, 2, 1.0, 1.0, 1.0, 1.0)
    out = render_color(s, c, 0.0)
    np.testing.assert_allclose(out.color, 0.5, atol=1e-12)
    np.testing.assert_allclose(out.alpha, 0.75, atol=1e-12)


def test_occlusion_bound():
    rng = np.random.default_rng(0)
    for _ in range(5):
        far_a, far_b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        near_c = rng.uniform(0, 1, 3)
        a = render_color(flat_scene([((0, 0, 2), 30.0, near_c, 0.9999), ((0, 0, 6), 30.0, far_a, 0.9999)]),
                         cam(), 0).color
        b = render_color(flat_scene([((0, 0, 2), 30.0, near_c, 0.9999), ((0, 0, 6), 30.0, far_b, 0.9999)]),
                         cam(), 0).color
        # the far splat's influence is at most 0.01 * c_far per channel
        assert np.all(np.abs(a - b) <= 0.01 * np.maximum(far_a, far_b) + 1e-12)


def test_ties_resolved_by_index():
    s = flat_scene([((0, 0, 3), 30.0, (1, 0, 0), 0.6), ((0, 0, 3), 30.0, (0, 0, 1), 0.6)])
    px = render_color(s, cam(), 0).color[16, 16]
    assert px[0] > px[2]  # index 0 is in front
    np.testing.assert_allclose(px, [0.6, 0, 0.4 * 0.6], atol=1e-3)


@pytest.mark.parametrize("seed,size,sh", [(0, 20, 0), (1, 33, 2), (2, 17, 3)])
def test_matches_bruteforce_oracle(seed, size, sh):
    s = random_scene(np.random.default_rng(seed), 15, MotionModel.fourier(2), sh, scale=(0.05, 0.3))
    c = ring_cameras(5, size=size)[seed]
    r = render(s, c, 0.3, 0.05)
    ref, Tf = oracle.render(s, c, 0.3, 0.05)
    np.testing.assert_allclose(r.image, ref, atol=1e-10)
    np.testing.assert_allclose(r.T_final, Tf, atol=1e-10)


def test_tile_boundaries_agree_with_oracle():
    # a splat centred on the corner of four 16x16 tiles
    s = flat_scene([((0, 0, 3), 0.1, (0.3, 0.7, 0.1), 0.8), ((0.02, -0.05, 4), 0.2, (1, 0, 0), 0.7)])
    c = Camera(48, 40, 60.0, 60.0, 16.0, 16.0)
    ref, _ = oracle.render(s, c, 0.0)
    np.testing.assert_allclose(render(s, c, 0.0).color, ref[:, :, :3], atol=1e-12)


def test_early_stop_bounds_transmittance():
    s = flat_scene([((0, 0, 2 + 0.1 * i), 30.0, (1, 1, 1), 0.99) for i in range(6)])
    r = render(s, cam(), 0)
    # after two 0.99 layers T = 1e-4 exactly is not < 1e-4; the third stops it
    assert r.T_final.max() < 1e-4 and r.n_contrib.max() == 3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_alpha_range_and_finiteness(seed):
    s = random_scene(np.random.default_rng(seed), 30, MotionModel.fourier(2), 1, scale=(0.01, 0.5))
    out = render(s, ring_cameras(2, size=24)[seed % 2], 0.7, 0.05)
    assert np.isfinite(out.image).all()
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    assert out.color.min() >= 0 and out.color.max() <= 1


def test_flow_static_zero():
    s = random_scene(np.random.default_rng(3), 10, MotionModel.fourier(2), 1)
    s.center[:, :, 1:] = 0
    f = render_flow(s, ring_cameras(1, size=24)[0], 0.2, 0.05)
    assert not f.fwd.any() and not f.bwd.any()


def test_flow_and_color_share_blend_weights():
    # encode each splat's flow in its color; the blended color must decode to the blended flow
    s = random_scene(np.random.default_rng(4), 12, MotionModel.fourier(2), 0, scale=(0.1, 0.4))
    c = ring_cameras(3, size=32)[1]
    r = render(s, c, 0.3, 0.05)
    f = r.proj.flow[:, 0]
    k = 4 * np.abs(f).max()
    enc = s.copy()
    enc.sh[:, 0, 0] = (f / k) / SH_C0
    col = render(enc, c, 0.3).color[:, :, 0]
    np.testing.assert_allclose(k * (col - 0.5 * r.alpha), r.flow.fwd[:, :, 0], atol=1e-10)


def test_flow_single_gaussian_matches_hand_formula():
    c = cam(size=32, fx=40.0)
    s = flat_scene([((0, 0, 4), 2.0, (1, 1, 1), 0.999)], model=MotionModel.polynomial(1))
    s.center[0, 0, 1] = 0.5  # linear motion along camera x
    dt = 0.02
    r = render(s, c, 0.3, dt)
    alpha = r.alpha[16, 16]
    fx_expected = alpha * c.fx * 0.5 * dt / 4.0
    assert abs(r.flow.fwd[16, 16, 0] - fx_expected) < 1e-4
    assert abs(r.flow.fwd[16, 16, 1]) < 1e-12


def test_chunked_dispatch():
    m = MotionModel.fourier(1)
    a = random_scene(np.random.default_rng(0), 5, m, 0)
    b = random_scene(np.random.default_rng(1), 5, m, 0)
    c = ring_cameras(1, size=16)[0]
    one = ChunkedScene([(0.0, 1.0, a)])
    np.testing.assert_array_equal(render_chunked(one, c, 0.3).color, render_color(a, c, 0.3).color)
    two = ChunkedScene([(0.0, 0.5, a), (0.5, 1.0, b)])
    np.testing.assert_array_equal(render_chunked(two, c, 0.5).color, render_color(b, c, 0.0).color)
    with pytest.raises(ValueError):
        render_chunked(one, c, 1.5)


def test_render_deterministic_across_thread_counts(tmp_path):
    code = ("import numpy as np, sys;from cdgs.synthetic import random_scene, ring_cameras;"
            "from cdgs.scene import MotionModel;from cdgs.rasterizer import render;"
            "s=random_scene(np.random.default_rng(5),400,MotionModel.fourier(2),2,scale=(0.02,0.3));"
            "r=render(s,ring_cameras(1,size=96)[0],0.4,0.05);sys.stdout.buffer.write(r.image.tobytes())")
    outs = []
    for n in ("1", "3"):
        env = dict(os.environ, NUMBA_NUM_THREADS=n)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                                   check=True).stdout)
    assert outs[0] == outs[1] and len(outs[0]) > 0

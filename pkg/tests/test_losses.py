import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from cdgs.losses import (LossWeights, loss_flow, loss_flow_and_grad, loss_recon, loss_recon_and_grad,
                         psnr, ssim, ssim_and_grad, total_loss)
from cdgs.rasterizer import FlowOutput


def rand_img(seed, shape=(24, 20, 3)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


def test_weights_validation():
    assert LossWeights() == LossWeights(0.2, 1000.0)
    with pytest.raises(ValueError):
        LossWeights(1.5, 0)
    with pytest.raises(ValueError):
        LossWeights(0.2, -1)


def test_recon_examples():
    a = rand_img(0)
    assert loss_recon(a, a, 0.2) == pytest.approx(0.0, abs=1e-15)
    assert loss_recon(np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.5), 0.0) == pytest.approx(0.3)
    b = a.copy()
    b[5, 5, 1] += 0.01
    assert loss_recon(b, a, 0.2) > 0
    with pytest.raises(ValueError):
        loss_recon(a, a[:-1], 0.2)


def test_ssim_examples():
    a = rand_img(1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    zero, one = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    assert ssim(zero, one) == pytest.approx(oracle.ssim_constant(0.0, 1.0), rel=1e-12)
    assert ssim(np.full((12, 12), 0.3), np.full((12, 12), 0.7)) == pytest.approx(oracle.ssim_constant(0.3, 0.7))
    b = rand_img(2)
    assert ssim(a, b) == ssim(b, a)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_matches_skimage():
    metrics = pytest.importorskip("skimage.metrics")
    a, b = rand_img(3, (40, 36, 3)), rand_img(4, (40, 36, 3))
    b = 0.5 * a + 0.5 * b
    ref = metrics.structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_and_recon_gradients_match_fd():
    a, b = rand_img(5, (14, 13, 3)), rand_img(6, (14, 13, 3))
    _, g = ssim_and_grad(a, b)
    fd = oracle.central_fd(lambda: ssim(a, b), a, h=1e-6)
    np.testing.assert_allclose(g, fd, atol=1e-8)
    _, g = loss_recon_and_grad(a, b, 0.2)
    fd = oracle.central_fd(lambda: loss_recon(a, b, 0.2), a, h=1e-7)
    np.testing.assert_allclose(g, fd, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 0.99))
def test_recon_nonnegative_and_ssim_bounded(seed, lam):
    a, b = rand_img(seed, (12, 12, 3)), rand_img(seed + 1, (12, 12, 3))
    assert loss_recon(a, b, lam) > 0
    assert -1 <= ssim(a, b) < 1


def flows(fwd, bwd):
    return FlowOutput(np.asarray(fwd, float), np.asarray(bwd, float))


def test_flow_examples():
    z = np.zeros((6, 5, 2))
    gt = flows(z, z)
    assert loss_flow(gt, gt) == 0.0
    off = z.copy()
    off[..., 0] = 1.0
    assert loss_flow(flows(off, z), gt) == pytest.approx(1.0)
    # mismatches confined to masked-out pixels
    bad = z.copy()
    bad[2:4, 1:3] = 5.0
    mask = np.ones((6, 5), bool)
    mask[2:4, 1:3] = False
    assert loss_flow(flows(bad, bad), gt, mask) == 0.0


def test_flow_empty_mask_warns():
    z = np.zeros((4, 4, 2))
    with pytest.warns(RuntimeWarning):
        v, (gf, gb) = loss_flow_and_grad(flows(z + 1, z + 1), flows(z, z), np.zeros((4, 4), bool))
    assert v == 0.0 and not gf.any() and not gb.any()


def test_flow_gradient_matches_fd():
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=(2, 5, 4, 2)), rng.normal(size=(2, 5, 4, 2))
    m = rng.uniform(size=(5, 4)) > 0.3
    _, (gf, gb) = loss_flow_and_grad(flows(p[0], p[1]), flows(q[0], q[1]), m)
    fd = oracle.central_fd(lambda: loss_flow(flows(p[0], p[1]), flows(q[0], q[1]), m), p, h=1e-7)
    np.testing.assert_allclose(np.stack([gf, gb]), fd, atol=1e-7)


def test_total_loss_examples():
    a, b = rand_img(7, (16, 16, 3)), rand_img(8, (16, 16, 3))
    z = flows(np.zeros((16, 16, 2)), np.zeros((16, 16, 2)))
    assert total_loss(a, b) == loss_recon(a, b, 0.2)
    assert total_loss(a, b, z, z, LossWeights(0.2, 1000)) == loss_recon(a, b, 0.2)
    assert total_loss(a, a, z, z) == pytest.approx(0.0, abs=1e-15)
    one = flows(np.ones((16, 16, 2)), np.zeros((16, 16, 2)))
    assert total_loss(a, b, one, z, LossWeights(0.2, 10)) == pytest.approx(loss_recon(a, b, 0.2) + 20)


def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    assert psnr(a, a) == float("inf")
    assert isinstance(psnr(a, a + 0.1), float)

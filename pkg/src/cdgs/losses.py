"""Training losses (L1, D-SSIM, flow L1) with gradients, and image metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_flow: float = 1000.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.lambda_flow < 0:
            raise ValueError("lambda_flow must be non-negative")


def _gauss_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL = _gauss_kernel()
_PAD = SSIM_WINDOW // 2


def _filter_valid(x: np.ndarray) -> np.ndarray:
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = correlate1d(y, _KERNEL, axis=1, mode="constant")
    return y[_PAD:-_PAD, _PAD:-_PAD]


def _filter_adjoint(g: np.ndarray) -> np.ndarray:
    # zero-pad back to full size, then the (symmetric) kernel again
    y = np.pad(g, ((_PAD, _PAD), (_PAD, _PAD)) + ((0, 0),) * (g.ndim - 2))
    y = correlate1d(y, _KERNEL, axis=0, mode="constant")
    return correlate1d(y, _KERNEL, axis=1, mode="constant")


def _as_hwc(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim_and_grad(x, y, need_grad: bool = True):
    """Mean SSIM over channels and valid windows, and its gradient w.r.t. ``x``."""
    x, y = _check_pair(x, y)
    shape = x.shape
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mx, my = _filter_valid(x), _filter_valid(y)
    exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    value = float(s.mean())
    if not need_grad:
        return value, None
    ds_dmx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    ds_dexx = -a1 * a2 / (b1 * b2 * b2)
    ds_dexy = 2 * a1 / (b1 * b2)
    grad = _filter_adjoint(ds_dmx) + 2 * x * _filter_adjoint(ds_dexx) + y * _filter_adjoint(ds_dexy)
    grad /= s.size
    return value, grad.reshape(shape)


def ssim(a, b) -> float:
    return ssim_and_grad(a, b, need_grad=False)[0]


def l1(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.abs(pred - target).mean())


def loss_recon_and_grad(pred, target, lam: float = 0.2):
    pred, target = _check_pair(pred, target)
    d = pred - target
    value = (1 - lam) * float(np.abs(d).mean())
    grad = (1 - lam) * np.sign(d) / d.size
    if lam > 0:
        s, gs = ssim_and_grad(pred, target)
        value += lam * (1 - s)
        grad -= lam * gs
    return value, grad


def loss_recon(pred, target, lam: float = 0.2) -> float:
    pred, target = _check_pair(pred, target)
    value = (1 - lam) * float(np.abs(pred - target).mean())
    if lam > 0:
        value += lam * (1 - ssim(pred, target))
    return value


def _flow_arrays(f):
    return (f.fwd, f.bwd) if hasattr(f, "fwd") else tuple(f)


def _mask_pair(mask, shape):
    if mask is None:
        m = np.ones(shape, dtype=bool)
        return m, m
    if isinstance(mask, tuple):
        return np.asarray(mask[0], bool), np.asarray(mask[1], bool)
    m = np.asarray(mask, bool)
    return m, m


def loss_flow_and_grad(pred, gt, mask=None):
    """Mean per-pixel L1 of the flow 2-vectors over masked pixels, fwd plus bwd.

    ``mask`` is None (all valid), one (H, W) array, or a (fwd, bwd) pair.
    """
    p, g = _flow_arrays(pred), _flow_arrays(gt)
    masks = _mask_pair(mask, p[0].shape[:2])
    value, grads = 0.0, []
    for pf, gf, m in zip(p, g, masks):
        pf, gf = _check_pair(pf, gf)
        grad = np.zeros_like(pf)
        n = int(m.sum())
        if n == 0:
            warnings.warn("flow mask is empty; flow loss is 0", RuntimeWarning, stacklevel=2)
        else:
            d = pf - gf
            value += float(np.abs(d[m]).sum()) / n
            grad[m] = np.sign(d[m]) / n
        grads.append(grad)
    return value, tuple(grads)


def loss_flow(pred, gt, mask=None) -> float:
    return loss_flow_and_grad(pred, gt, mask)[0]


def total_loss(pred_img, gt_img, pred_flow=None, gt_flow=None, w: LossWeights = LossWeights(),
               mask=None) -> float:
    value = loss_recon(pred_img, gt_img, w.lambda_dssim)
    if pred_flow is not None and gt_flow is not None and w.lambda_flow > 0:
        value += w.lambda_flow * loss_flow(pred_flow, gt_flow, mask)
    return value


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


class Objective:
    """Loss on a rendered frame composited over a constant background.

    ``flows`` is ``(gt_fwd, gt_bwd, mask_fwd, mask_bwd)`` or None.
    """

    def __init__(self, target, background, weights: LossWeights, flows=None,
                 recon_weight: float = 1.0):
        self.target = np.asarray(target, dtype=np.float64)
        self.bg = np.asarray(background, dtype=np.float64).reshape(3)
        self.w = weights
        self.flows = flows
        self.recon_weight = recon_weight

    def _use_flow(self, r) -> bool:
        return self.flows is not None and self.w.lambda_flow > 0 and r.with_flow

    def terms(self, r) -> dict:
        pred = r.composite(self.bg)
        out = {"l1": l1(pred, self.target)}
        out["recon"] = loss_recon(pred, self.target, self.w.lambda_dssim)
        if self._use_flow(r):
            gf, gb, mf, mb = self.flows
            out["flow"] = loss_flow(r.flow, (gf, gb), (mf, mb))
        out["total"] = self.recon_weight * out["recon"] + self.w.lambda_flow * out.get("flow", 0.0)
        return out

    def value(self, r) -> float:
        return self.terms(r)["total"]

    def contributions(self, r) -> np.ndarray:
        """Per-element terms whose sum is the total loss (up to a constant).

        Differencing these elementwise keeps finite differences accurate:
        pixels a perturbation does not touch cancel exactly.
        """
        pred = r.composite(self.bg)
        lam = self.w.lambda_dssim
        d = np.abs(pred - self.target)
        parts = [self.recon_weight * (1 - lam) * d.ravel() / d.size]
        if lam > 0:
            x, y = pred, self.target
            mx, my = _filter_valid(x), _filter_valid(y)
            exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
            s = ((2 * mx * my + SSIM_C1) * (2 * (exy - mx * my) + SSIM_C2)
                 / ((mx * mx + my * my + SSIM_C1) * ((exx - mx * mx) + (eyy - my * my) + SSIM_C2)))
            parts.append(-self.recon_weight * lam * s.ravel() / s.size)
        if self._use_flow(r):
            gf, gb, mf, mb = self.flows
            for p, g, m in zip((r.flow.fwd, r.flow.bwd), (gf, gb), (mf, mb)):
                n = int(m.sum())
                if n:
                    parts.append(self.w.lambda_flow * np.abs(p - g)[m].ravel() / n)
        return np.concatenate(parts)

    def image_grads(self, r):
        """Upstream gradients (d_color, d_alpha, d_flow_fwd, d_flow_bwd) and nothing else."""
        return self.evaluate(r)[1]

    def evaluate(self, r):
        pred = r.composite(self.bg)
        rv, g = loss_recon_and_grad(pred, self.target, self.w.lambda_dssim)
        g = g * self.recon_weight
        d_alpha = -(g * self.bg).sum(axis=2)
        value = self.recon_weight * rv
        terms = {"recon": rv}
        d_fwd = d_bwd = None
        if self._use_flow(r):
            gf, gb, mf, mb = self.flows
            fv, (d_fwd, d_bwd) = loss_flow_and_grad(r.flow, (gf, gb), (mf, mb))
            value += self.w.lambda_flow * fv
            d_fwd, d_bwd = d_fwd * self.w.lambda_flow, d_bwd * self.w.lambda_flow
            terms["flow"] = fv
        terms["total"] = value
        return terms, (g, d_alpha, d_fwd, d_bwd)

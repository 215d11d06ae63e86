"""Analytic backward pass of the renderer and a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit, prange

from .projection import VISIBLE, preprocess_backward
from .rasterizer import ALPHA_MAX, ALPHA_MIN, MAHALANOBIS_MAX, TILE, Rendered, _gather_tile, render
from .scene import Camera, Scene


class NonFiniteGradientError(ValueError):
    pass


@njit(parallel=True, cache=True)
def _raster_backward(ptr, ids, means, conic, opacity, feats, W, H, tile,
                     T_final, last, g_img, g_alpha,
                     e_mean, e_conic, e_opacity, e_feat, e_mean_color):
    ntx = (W + tile - 1) // tile
    n_tiles = ptr.shape[0] - 1
    F = feats.shape[1]
    for ti in prange(n_tiles):
        y0 = (ti // ntx) * tile
        x0 = (ti % ntx) * tile
        s = ptr[ti]
        e = ptr[ti + 1]
        lm, lo, lf = _gather_tile(s, e, ids, means, conic, opacity, feats)
        n = e - s
        gm = np.zeros((n, 8))  # mean x, y, conic a, b, c, opacity, color-only mean x, y
        gf = np.zeros((n, F))
        acc = np.empty(F)
        gi = np.empty(F)
        for py in range(y0, min(y0 + tile, H)):
            for px in range(x0, min(x0 + tile, W)):
                fx = px + 0.5
                fy = py + 0.5
                Tf = T_final[py, px]
                T = Tf
                ga = g_alpha[py, px]
                for f in range(F):
                    acc[f] = 0.0
                    gi[f] = g_img[py, px, f]
                for j in range(last[py, px] - 1 - s, -1, -1):
                    dx = fx - lm[j, 0]
                    dy = fy - lm[j, 1]
                    A = lm[j, 2]
                    B = lm[j, 3]
                    C = lm[j, 4]
                    m2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                    if m2 > MAHALANOBIS_MAX:
                        continue
                    G = np.exp(-0.5 * m2)
                    a = lo[j] * G
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    inv = 1.0 / (1.0 - a)
                    Ti = T * inv
                    w = a * Ti
                    da = ga * Tf * inv
                    da_color = 0.0
                    for f in range(F):
                        if f == 3:
                            da_color = da
                        da += gi[f] * (lf[j, f] * Ti - acc[f] * inv)
                        gf[j, f] += gi[f] * w
                        acc[f] += lf[j, f] * w
                    T = Ti
                    if not clamped:
                        gm[j, 5] += da * G
                        dm2 = -0.5 * da * a
                        gm[j, 2] += dm2 * dx * dx
                        gm[j, 3] += dm2 * 2.0 * dx * dy
                        gm[j, 4] += dm2 * dy * dy
                        gm[j, 0] += -2.0 * dm2 * (A * dx + B * dy)
                        gm[j, 1] += -2.0 * dm2 * (B * dx + C * dy)
                        if F > 3:
                            dm2 = -0.5 * da_color * a
                        gm[j, 6] += -2.0 * dm2 * (A * dx + B * dy)
                        gm[j, 7] += -2.0 * dm2 * (B * dx + C * dy)
        for j in range(n):
            k = s + j
            e_mean[k, 0] = gm[j, 0]
            e_mean[k, 1] = gm[j, 1]
            e_conic[k, 0] = gm[j, 2]
            e_conic[k, 1] = gm[j, 3]
            e_conic[k, 2] = gm[j, 4]
            e_opacity[k] = gm[j, 5]
            e_mean_color[k, 0] = gm[j, 6]
            e_mean_color[k, 1] = gm[j, 7]
            for f in range(F):
                e_feat[k, f] = gf[j, f]


@njit(cache=True)
def _reduce_entries(ids, e_mean, e_conic, e_opacity, e_feat, e_mean_color,
                    g_mean, g_conic, g_opacity, g_feat, g_mean_color):
    # fixed entry order keeps the sums bitwise reproducible
    F = e_feat.shape[1]
    for k in range(ids.shape[0]):
        g = ids[k]
        g_mean[g, 0] += e_mean[k, 0]
        g_mean[g, 1] += e_mean[k, 1]
        g_mean_color[g, 0] += e_mean_color[k, 0]
        g_mean_color[g, 1] += e_mean_color[k, 1]
        for j in range(3):
            g_conic[g, j] += e_conic[k, j]
        g_opacity[g] += e_opacity[k]
        for f in range(F):
            g_feat[g, f] += e_feat[k, f]


@dataclass
class GradientBuffer:
    """Per-Gaussian gradients mirroring the scene fields."""

    center: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    scale_slope: np.ndarray
    sh: np.ndarray
    opacity_logit: np.ndarray
    mean2d: np.ndarray  # (N, 2) gradient on the pixel-space center
    # the same, restricted to the color / alpha loss terms; drives densification
    mean2d_color: np.ndarray
    observed: np.ndarray  # (N,) splat touched at least one tile

    FIELDS = Scene.FIELDS

    @classmethod
    def zeros(cls, scene: Scene) -> "GradientBuffer":
        N = len(scene)
        return cls(**{k: np.zeros_like(getattr(scene, k)) for k in Scene.FIELDS},
                   mean2d=np.zeros((N, 2)), mean2d_color=np.zeros((N, 2)),
                   observed=np.zeros(N, dtype=bool))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.FIELDS}

    def __add__(self, other: "GradientBuffer") -> "GradientBuffer":
        return GradientBuffer(**{k: getattr(self, k) + getattr(other, k) for k in self.FIELDS},
                              mean2d=self.mean2d + other.mean2d,
                              mean2d_color=self.mean2d_color + other.mean2d_color,
                              observed=self.observed | other.observed)

    def is_zero(self) -> bool:
        return all(not np.any(getattr(self, k)) for k in self.FIELDS)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, k))) for k in self.FIELDS)


@dataclass
class ViewspaceAccumulator:
    """Running sum of screen-space center gradient norms, for densification.

    Norms are measured in normalized device units (pixels scaled by half the
    image size) so the threshold does not depend on resolution.
    """

    grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ViewspaceAccumulator":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, buf: GradientBuffer, width: int, height: int) -> None:
        g = buf.mean2d_color * np.array([0.5 * width, 0.5 * height])
        norm = np.sqrt((g * g).sum(axis=1))
        self.grad_sum[buf.observed] += norm[buf.observed]
        self.count[buf.observed] += 1

    def average(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.count, 1)

    def select(self, index) -> "ViewspaceAccumulator":
        return ViewspaceAccumulator(self.grad_sum[index].copy(), self.count[index].copy())


def _check_finite(name, a):
    if a is not None and not np.all(np.isfinite(a)):
        raise NonFiniteGradientError(f"non-finite upstream gradient in {name}")


def backward(r: Rendered, d_color=None, d_alpha=None, d_flow_fwd=None,
             d_flow_bwd=None) -> GradientBuffer:
    """Adjoint of :func:`render` for the given upstream image gradients."""
    scene, cam = r.scene, r.camera
    H, W = cam.height, cam.width
    F = r.feats.shape[1]
    g_img = np.zeros((H, W, F))
    for name, grad, sl in (("color", d_color, slice(0, 3)), ("flow_fwd", d_flow_fwd, slice(3, 5)),
                           ("flow_bwd", d_flow_bwd, slice(5, 7))):
        _check_finite(name, grad)
        if grad is None:
            continue
        if sl.start >= F:
            raise ValueError(f"{name} gradient given but the render has no flow channels")
        g_img[:, :, sl] = grad
    _check_finite("alpha", d_alpha)
    g_alpha = np.zeros((H, W)) if d_alpha is None else np.ascontiguousarray(d_alpha, dtype=np.float64)

    N = len(scene)
    E = r.ids.shape[0]
    e_mean, e_conic = np.zeros((E, 2)), np.zeros((E, 3))
    e_opacity, e_feat, e_mc = np.zeros(E), np.zeros((E, F)), np.zeros((E, 2))
    proj = r.proj
    _raster_backward(r.ptr, r.ids, proj.means, proj.conic, proj.opacity, r.feats, W, H, TILE,
                     r.T_final, r.last, g_img, g_alpha, e_mean, e_conic, e_opacity, e_feat, e_mc)
    g_mean, g_conic = np.zeros((N, 2)), np.zeros((N, 3))
    g_opacity, g_feat, g_mean_color = np.zeros(N), np.zeros((N, F)), np.zeros((N, 2))
    _reduce_entries(r.ids, e_mean, e_conic, e_opacity, e_feat, e_mc,
                    g_mean, g_conic, g_opacity, g_feat, g_mean_color)
    g_flow = g_feat[:, 3:7] if F > 3 else np.zeros((N, 4))
    grads = preprocess_backward(scene, cam, proj, g_mean, g_conic, g_feat[:, :3], g_opacity, g_flow)
    observed = np.zeros(N, dtype=bool)
    observed[r.ids] = True
    observed &= proj.status == VISIBLE
    return GradientBuffer(**grads, mean2d=g_mean, mean2d_color=g_mean_color, observed=observed)


def backward_color(scene: Scene, cam: Camera, t: float, d_color, d_alpha=None) -> GradientBuffer:
    return backward(render(scene, cam, t), d_color, d_alpha)


def backward_flow(scene: Scene, cam: Camera, t: float, dt: float, d_flow) -> GradientBuffer:
    """``d_flow`` is a pair (fwd, bwd) of (H, W, 2) gradients (or a FlowOutput)."""
    fwd, bwd = (d_flow.fwd, d_flow.bwd) if hasattr(d_flow, "fwd") else d_flow
    return backward(render(scene, cam, t, dt), None, None, fwd, bwd)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    max_abs_err_tiny: float
    h: float
    n_params: int
    n_refined: int
    passed: bool
    rel_tol: float
    abs_tol: float
    details: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("max_rel_err", "worst_param", "max_abs_err_tiny", "h",
                                              "n_params", "n_refined", "passed", "rel_tol", "abs_tol")}


def _central(f, arr, idx, x0, h):
    """Central difference and its rounding-noise estimate.

    ``f`` may return per-element loss terms; they are differenced before
    summation so untouched elements cancel exactly.
    """
    arr[idx] = x0 + h
    fp = np.atleast_1d(np.asarray(f(), dtype=np.float64))
    arr[idx] = x0 - h
    fm = np.atleast_1d(np.asarray(f(), dtype=np.float64))
    arr[idx] = x0
    diff = fp - fm
    touched = diff != 0
    noise = 4 * np.finfo(float).eps * float((np.abs(fp[touched]) + np.abs(fm[touched])).sum())
    return float(diff.sum()) / (2.0 * h), noise / (2.0 * h)


def finite_difference_check(scene: Scene, value_fn: Callable[[Scene], float | np.ndarray],
                            analytic: dict[str, np.ndarray], h: float = 1e-5,
                            rel_tol: float = 1e-3, abs_tol: float = 1e-8,
                            fields=Scene.FIELDS, max_refine: int = 12) -> GradCheckReport:
    """Compare ``analytic`` with central differences of ``value_fn`` for every parameter.

    The step starts at ``h``.  A difference is accepted once the estimates
    at the current step and at half of it agree; otherwise the step is
    halved, which moves the stencil off any threshold (alpha cut-off,
    clamp, L1 kink) that happened to fall inside it.  Parameters whose
    difference is below ``abs_tol`` in magnitude are compared absolutely.
    """
    work = scene.copy()
    f = lambda: value_fn(work)  # noqa: E731
    worst, worst_name, worst_abs, refined, n, details = 0.0, "", 0.0, 0, 0, []
    for name in fields:
        arr = getattr(work, name)
        an = analytic[name]
        if name == "scale_slope" and not scene.model.time_varying_scale:
            continue
        for idx in np.ndindex(arr.shape):
            n += 1
            x0 = float(arr[idx])
            step = h
            fd, noise = _central(f, arr, idx, x0, step)
            for _ in range(max_refine):
                fd_half, noise_half = _central(f, arr, idx, x0, step / 2)
                agree = abs(fd - fd_half) <= 1e-4 * max(abs(fd), abs(fd_half)) + noise + noise_half
                step /= 2
                fd = fd_half
                if agree:
                    break
            if step < h / 2:
                refined += 1
            a = float(an[idx])
            label = f"{name}{list(idx)}"
            if abs(fd) < abs_tol:
                err = abs(a - fd)
                if err > worst_abs:
                    worst_abs = err
                details.append((label, a, fd, err, "abs"))
                if err >= abs_tol and err / abs_tol > worst:
                    worst, worst_name = max(worst, err / max(abs(a), abs(fd), 1e-300)), label
                continue
            rel = abs(a - fd) / max(abs(a), abs(fd))
            details.append((label, a, fd, rel, "rel"))
            if rel > worst:
                worst, worst_name = rel, label
    passed = worst < rel_tol and worst_abs < abs_tol
    return GradCheckReport(worst, worst_name, worst_abs, h, n, refined, passed, rel_tol, abs_tol, details)


def grad_check(scene: Scene, cam: Camera, t: float, loss: str = "total", h: float = 1e-5,
               dt: float | None = None, seed: int = 0, rel_tol: float = 1e-3,
               abs_tol: float = 1e-8, analytic_fn=None) -> GradCheckReport:
    """Check analytic scene gradients of a named loss against finite differences.

    ``loss`` is one of ``quadratic`` (sum of squared parameters, a harness
    self-test), ``recon``, ``flow`` or ``total``; image-space targets are
    drawn from ``seed``.  ``analytic_fn(scene) -> dict`` overrides the
    analytic side (used to test the harness itself).
    """
    from .losses import LossWeights, Objective

    if loss == "quadratic":
        value_fn = lambda s: 0.5 * sum(float((getattr(s, k) ** 2).sum()) for k in Scene.FIELDS)  # noqa: E731
        grad_fn = lambda s: {k: getattr(s, k).copy() for k in Scene.FIELDS}  # noqa: E731
    else:
        rng = np.random.default_rng(seed)
        H, W = cam.height, cam.width
        target = rng.uniform(0, 1, (H, W, 3))
        bg = rng.uniform(0, 1, 3)
        use_flow = loss in ("flow", "total")
        dt = (dt if dt is not None else 0.05) if use_flow else None
        flows = None
        if use_flow:
            flows = (rng.normal(0, 0.5, (H, W, 2)), rng.normal(0, 0.5, (H, W, 2)),
                     rng.uniform(size=(H, W)) < 0.8, rng.uniform(size=(H, W)) < 0.8)
        weights = {"recon": LossWeights(0.2, 0.0), "flow": LossWeights(0.2, 1.0),
                   "total": LossWeights(0.2, 1000.0)}[loss]
        recon_weight = 0.0 if loss == "flow" else 1.0
        obj = Objective(target, bg, weights, flows, recon_weight=recon_weight)

        def value_fn(s):
            return obj.contributions(render(s, cam, t, dt))

        def grad_fn(s):
            r = render(s, cam, t, dt)
            return backward(r, *obj.image_grads(r)).as_dict()

    analytic = (analytic_fn or grad_fn)(scene)
    return finite_difference_check(scene, value_fn, analytic, h=h, rel_tol=rel_tol, abs_tol=abs_tol)

"""Time evaluation of Gaussian centers, rotations and scales."""
from __future__ import annotations

import numpy as np

from .scene import FOURIER, POLYNOMIAL, DynamicGaussian, MotionModel, Scene

ROT_EPS = 1e-8


class DegenerateRotationError(ValueError):
    def __init__(self, index, t):
        super().__init__(f"gaussian {index}: rotation quaternion vanishes at t={t}")
        self.index = index
        self.t = t


def catmull_rom_weights(n_control: int, t: float) -> np.ndarray:
    """Uniform Catmull-Rom weights over ``n_control`` knots at i/(n-1).

    Times outside [0, 1] are clamped; end knots are duplicated so the
    weights always sum to one.
    """
    t = min(max(float(t), 0.0), 1.0)
    x = t * (n_control - 1)
    seg = min(int(np.floor(x)), n_control - 2)
    u = x - seg
    u2, u3 = u * u, u * u * u
    w = 0.5 * np.array([-u3 + 2 * u2 - u, 3 * u3 - 5 * u2 + 2, -3 * u3 + 4 * u2 + u, u3 - u2])
    out = np.zeros(n_control)
    for j, wj in zip(range(seg - 1, seg + 3), w):
        out[min(max(j, 0), n_control - 1)] += wj
    return out


def basis(model: MotionModel, t: float) -> np.ndarray:
    """Basis values at time ``t``; the center along an axis is ``coeffs @ basis``.

    Fourier: [1, sin 2pi t, cos 2pi t, ..., sin 2L pi t, cos 2L pi t].
    """
    t = float(t)
    if model.kind == FOURIER:
        out = np.empty(2 * model.order + 1)
        out[0] = 1.0
        i = np.arange(1, model.order + 1)
        out[1::2] = np.sin(2.0 * np.pi * i * t)
        out[2::2] = np.cos(2.0 * np.pi * i * t)
        return out
    if model.kind == POLYNOMIAL:
        return t ** np.arange(model.order + 1, dtype=np.float64)
    return catmull_rom_weights(model.order, t)


def center_coeff_gradient(model: MotionModel, t: float) -> np.ndarray:
    # the center is linear in its coefficients
    return basis(model, t)


def eval_center(g: DynamicGaussian, model: MotionModel, t: float) -> np.ndarray:
    return np.asarray(g.center_coeffs) @ basis(model, t)


def eval_rotation(g: DynamicGaussian, t: float, index=None) -> np.ndarray:
    q = np.asarray(g.rot_coeffs)[:, 0] + np.asarray(g.rot_coeffs)[:, 1] * t
    n = np.linalg.norm(q)
    if n < ROT_EPS:
        raise DegenerateRotationError(index, t)
    return q / n


def eval_scale(g: DynamicGaussian, model: MotionModel, t: float) -> np.ndarray:
    log_s = np.asarray(g.log_scale, dtype=np.float64)
    if model.time_varying_scale:
        log_s = log_s + np.asarray(g.scale_slope) * t
    return np.exp(log_s)


def scene_flow_delta(g: DynamicGaussian, model: MotionModel, t: float,
                     dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward 3D displacement of the center over one step ``dt``."""
    c = np.asarray(g.center_coeffs)
    fwd = c @ (basis(model, t + dt) - basis(model, t))
    bwd = c @ (basis(model, t) - basis(model, t - dt))
    return fwd, bwd


def scene_centers(scene: Scene, t: float) -> np.ndarray:
    """(N, 3) centers of every Gaussian at time ``t``."""
    return scene.center @ basis(scene.model, t)


def scene_rotations(scene: Scene, t: float) -> np.ndarray:
    q = scene.rot[:, :, 0] + scene.rot[:, :, 1] * t
    n = np.linalg.norm(q, axis=1)
    bad = np.flatnonzero(n < ROT_EPS)
    if bad.size:
        raise DegenerateRotationError(int(bad[0]), t)
    return q / n[:, None]


def scene_scales(scene: Scene, t: float) -> np.ndarray:
    log_s = scene.log_scale
    if scene.model.time_varying_scale:
        log_s = log_s + scene.scale_slope * t
    return np.exp(log_s)

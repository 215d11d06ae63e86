"""Hand-built ground-truth scenes, camera rigs and rendered datasets for tests and demos."""
from __future__ import annotations

import numpy as np

from .dataset import Dataset, Frame
from .motion import scene_centers
from .rasterizer import render
from .scene import Camera, MotionModel, Scene, sh_coeff_count
from .projection import SH_C0


def random_scene(rng: np.random.Generator, n: int, model: MotionModel | None = None,
                 sh_degree: int = 1, spread: float = 0.5, motion: float = 0.1,
                 scale: tuple[float, float] = (0.05, 0.15), rot_slope: float = 0.3,
                 sh_scale: float = 0.3, opacity: tuple[float, float] = (0.3, 0.9)) -> Scene:
    """Random Gaussians around the origin with random motion coefficients."""
    model = model or MotionModel.fourier(2)
    C, K = model.n_coeffs, sh_coeff_count(sh_degree)
    center = np.zeros((n, 3, C))
    center[:, :, 0] = rng.uniform(-spread, spread, (n, 3))
    if C > 1:
        if model.kind == "spline":
            center += rng.normal(0, motion, (n, 3, C))
        else:
            center[:, :, 1:] = rng.normal(0, motion, (n, 3, C - 1))
    rot = np.zeros((n, 4, 2))
    q = rng.normal(size=(n, 4))
    rot[:, :, 0] = q / np.linalg.norm(q, axis=1, keepdims=True)
    rot[:, :, 1] = rng.normal(0, rot_slope, (n, 4))
    sh = rng.normal(0, sh_scale, (n, 3, K))
    sh[:, :, 0] = (rng.uniform(0.1, 0.9, (n, 3)) - 0.5) / SH_C0
    p = rng.uniform(*opacity, n)
    return Scene(model, sh_degree, center, rot, np.log(rng.uniform(*scale, (n, 3))),
                 rng.normal(0, 0.2, (n, 3)) if model.time_varying_scale else np.zeros((n, 3)),
                 sh, np.log(p / (1 - p)))


def ring_cameras(n: int, radius: float = 4.0, height: float = 1.0, size: int = 64,
                 fov_deg: float = 40.0, phase: float = 0.0) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal ring, all looking at the origin."""
    fx = 0.5 * size / np.tan(0.5 * np.radians(fov_deg))
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n + phase
        eye = (radius * np.cos(a), radius * np.sin(a), height)
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), width=size, height=size, fx=fx))
    return cams


def ground_truth_scene(seed: int = 0, n: int = 50, harmonics: int = 2, amplitude: float = 0.25,
                       spread: float = 0.7) -> Scene:
    """Opaque, colorful Gaussians whose centers move with ``harmonics`` Fourier terms."""
    rng = np.random.default_rng(seed)
    model = MotionModel.fourier(harmonics)
    s = random_scene(rng, n, model, sh_degree=0, spread=spread, motion=0.0,
                     scale=(0.06, 0.14), rot_slope=0.2, opacity=(0.85, 0.97))
    for h in range(1, harmonics + 1):
        # the top harmonic carries as much motion as the first so truncation shows
        amp = amplitude / np.sqrt(harmonics)
        s.center[:, :, 2 * h - 1:2 * h + 1] = rng.normal(0, amp, (n, 3, 2))
    return s


def render_dataset(gt: Scene, cameras: list[Camera], n_times: int, *, with_flow: bool = True,
                   test_pairs=(), test_cameras: list[Camera] | None = None,
                   background=(0.0, 0.0, 0.0), bbox=None) -> Dataset:
    """Render every (camera, timestep) pair; ``test_pairs`` index into ``test_cameras``."""
    bg = np.asarray(background, dtype=np.float64)
    dt = 1.0 / n_times

    def frame(cam, ci, ti):
        r = render(gt, cam, ti / n_times, dt if with_flow else None)
        img = r.composite(bg)
        f = Frame(img, cam, ti, ci, name=f"cam{ci:02d}_t{ti:03d}")
        if with_flow:
            f.flow_fwd = r.flow.fwd.copy()
            f.flow_bwd = r.flow.bwd.copy()
        return f

    frames = [frame(cam, ci, ti) for ti in range(n_times) for ci, cam in enumerate(cameras)]
    tests = [frame(test_cameras[ci], ci, ti) for ci, ti in test_pairs]
    if bbox is None:
        # tight box around the swept centers, padded by three scales
        pts = np.concatenate([scene_centers(gt, t) for t in np.linspace(0, 1, 33)])
        pad = 3 * float(np.exp(gt.log_scale).max())
        bbox = np.stack([pts.min(axis=0) - pad, pts.max(axis=0) + pad])
    return Dataset(frames, n_times, bg, np.asarray(bbox), tests)


def benchmark_dataset(seed: int = 0, n_cameras: int = 8, n_times: int = 20, size: int = 64,
                      harmonics: int = 2, n_gaussians: int = 50, with_flow: bool = True,
                      amplitude: float = 0.08) -> Dataset:
    """The standard synthetic benchmark: ring rig plus three unseen held-out views."""
    gt = ground_truth_scene(seed, n_gaussians, harmonics, amplitude)
    cams = ring_cameras(n_cameras, size=size)
    held = ring_cameras(3, size=size, height=1.6, phase=np.pi / n_cameras)
    rng = np.random.default_rng(seed + 1000)
    times = rng.choice(n_times, 3, replace=n_times < 3)
    return render_dataset(gt, cams, n_times, with_flow=with_flow,
                          test_pairs=[(i, int(t)) for i, t in enumerate(times)], test_cameras=held)

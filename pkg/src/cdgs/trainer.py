"""Two-stage optimization, adaptive density control and chunked training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .dataset import Dataset, Frame
from .gradients import GradientBuffer, ViewspaceAccumulator, backward
from .losses import LossWeights, Objective, psnr, ssim
from .motion import scene_rotations, scene_scales
from .projection import SH_C0, quat_to_rotmat
from .rasterizer import render
from .scene import SPLINE, ChunkedScene, MotionModel, Scene, param_count_per_gaussian, sh_coeff_count

REFERENCE_ITERS = 30_000
BYTES_PER_FLOAT = 4


class NonFiniteError(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group '{group}'")
        self.group = group


@dataclass
class TrainConfig:
    total_iters: int = 30_000
    static_iters: int = 3_000
    # learning rates; the center rate is multiplied by the scene extent
    lr_center_init: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_sh: float = 2.5e-3
    sh_rest_divisor: float = 20.0
    lr_opacity: float = 5e-2
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3_000
    lambda_dssim: float = 0.2
    lambda_flow: float = 1000.0
    seed: int = 0
    chunk_size: int | None = None
    init_points: int = 5_000
    max_gaussians: int | None = None
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.static_iters <= self.total_iters:
            raise ValueError("need 0 <= static_iters <= total_iters")
        if self.static_iters == self.total_iters and self.total_iters > 0:
            pass  # static-only run; allowed for tests
        for name in ("grad_threshold", "percent_dense", "prune_opacity", "densify_interval",
                     "opacity_reset_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be at least 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_dssim, self.lambda_flow)

    def scaled(self, total_iters: int) -> "TrainConfig":
        """Same recipe with the schedule boundaries scaled to ``total_iters``.

        The densification interval is an averaging window over views, not a
        phase boundary, so it keeps its value.
        """
        f = total_iters / REFERENCE_ITERS

        def sc(n):
            return max(1, int(round(n * f)))

        return replace(self, total_iters=total_iters, static_iters=int(round(self.static_iters * f)),
                       densify_from=sc(self.densify_from),
                       densify_until=sc(self.densify_until),
                       opacity_reset_interval=sc(self.opacity_reset_interval))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def zeros_like(cls, scene: Scene) -> "AdamState":
        return cls({k: np.zeros_like(getattr(scene, k)) for k in Scene.FIELDS},
                   {k: np.zeros_like(getattr(scene, k)) for k in Scene.FIELDS})

    def select(self, index) -> "AdamState":
        return replace(self, m={k: a[index] for k, a in self.m.items()},
                       v={k: a[index] for k, a in self.v.items()})

    def append_zeros(self, n: int) -> "AdamState":
        def pad(a):
            return np.concatenate([a, np.zeros((n,) + a.shape[1:])])
        return replace(self, m={k: pad(a) for k, a in self.m.items()},
                       v={k: pad(a) for k, a in self.v.items()})

    def __len__(self):
        return self.m["opacity_logit"].shape[0]


def lr_by_group(cfg: TrainConfig, iteration: int, extent: float, sh_degree: int) -> dict:
    """Per-field learning rates (arrays broadcast against the field)."""
    p = min(max(iteration / max(cfg.total_iters, 1), 0.0), 1.0)
    lr_c = math.exp((1 - p) * math.log(cfg.lr_center_init) + p * math.log(cfg.lr_center_final)) * extent
    sh_lr = np.full(sh_coeff_count(sh_degree), cfg.lr_sh / cfg.sh_rest_divisor)
    sh_lr[0] = cfg.lr_sh
    return {"center": lr_c, "rot": cfg.lr_rot, "log_scale": cfg.lr_scale,
            "scale_slope": cfg.lr_scale, "sh": sh_lr, "opacity_logit": cfg.lr_opacity}


def adam_step(scene: Scene, state: AdamState, grads: dict, lrs: dict) -> Scene:
    """Bias-corrected Adam update of ``scene`` in place (also returned)."""
    for k in Scene.FIELDS:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteError(k)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k in Scene.FIELDS:
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p = getattr(scene, k)
        p -= lrs[k] * upd
    return scene


# ------------------------------------------------------------ initialization

def knn_log_scale(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Isotropic log scale from the mean squared distance to ``k`` neighbours."""
    n = len(points)
    if n < 2:
        return np.full(n, math.log(0.01))
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, kk + 1)
    d2 = np.maximum((d[:, 1:] ** 2).mean(axis=1), 1e-14)
    return 0.5 * np.log(d2)


def init_scene(points: np.ndarray, colors: np.ndarray | None, model: MotionModel,
               sh_degree: int, extent: float = 1.0, opacity: float = 0.1) -> Scene:
    """Static Gaussians at ``points``: identity rotation, kNN scale, DC color only."""
    n = len(points)
    C, K = model.n_coeffs, sh_coeff_count(sh_degree)
    center = np.zeros((n, 3, C))
    if model.kind == SPLINE:
        center[:] = points[:, :, None]
    else:
        center[:, :, 0] = points
    rot = np.zeros((n, 4, 2))
    rot[:, 3, 0] = 1.0
    ls = np.repeat(knn_log_scale(points)[:, None], 3, axis=1)
    sh = np.zeros((n, 3, K))
    if colors is not None:
        sh[:, :, 0] = (np.asarray(colors) - 0.5) / SH_C0
    logit = math.log(opacity / (1 - opacity))
    return Scene(model, sh_degree, center, rot, ls, np.zeros((n, 3)), sh, np.full(n, logit),
                 extent=extent)


def random_init(data: Dataset, cfg: TrainConfig, model: MotionModel, sh_degree: int,
                rng: np.random.Generator) -> Scene:
    extent = data.camera_extent()
    if data.init_points is not None and len(data.init_points):
        return init_scene(np.asarray(data.init_points, dtype=np.float64), data.init_colors,
                          model, sh_degree, extent)
    lo, hi = data.scene_bbox()
    pts = rng.uniform(lo, hi, (cfg.init_points, 3))
    return init_scene(pts, None, model, sh_degree, extent)


# --------------------------------------------------------- density control

def densify_and_prune(scene: Scene, stats: ViewspaceAccumulator, cfg: TrainConfig, t_ref: float,
                      rng: np.random.Generator, adam: AdamState | None = None):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    Returns ``(scene, stats, adam)``; new Gaussians get zero Adam moments
    and the accumulator starts over.
    """
    n = len(scene)
    avg = stats.average()
    over = avg >= cfg.grad_threshold
    if cfg.max_gaussians is not None and n + over.sum() > cfg.max_gaussians:
        over[:] = False
    big = scene_scales(scene, t_ref).max(axis=1) > cfg.percent_dense * scene.extent
    clone_idx = np.flatnonzero(over & ~big)
    split_idx = np.flatnonzero(over & big)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    parts = [scene.select(np.flatnonzero(keep)), scene.select(clone_idx)]
    if split_idx.size:
        children = scene.select(np.repeat(split_idx, 2))
        s = scene_scales(scene, t_ref)[np.repeat(split_idx, 2)]
        R = np.stack([quat_to_rotmat(q) for q in scene_rotations(scene, t_ref)[np.repeat(split_idx, 2)]])
        offset = np.einsum("nij,nj->ni", R, s * rng.standard_normal(s.shape))
        if scene.model.kind == SPLINE:
            children.center += offset[:, :, None]
        else:
            children.center[:, :, 0] += offset
        children.log_scale -= math.log(1.6)
        parts.append(children)
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    if adam is not None:
        adam = adam.select(np.flatnonzero(keep)).append_zeros(len(out) - int(keep.sum()))

    alive = out.opacity >= cfg.prune_opacity
    if not alive.any() and len(out):
        alive[int(np.argmax(out.opacity))] = True  # never prune everything
    if not alive.all():
        idx = np.flatnonzero(alive)
        out = out.select(idx)
        if adam is not None:
            adam = adam.select(idx)
    return out, ViewspaceAccumulator.zeros(len(out)), adam


def reset_opacity(scene: Scene, adam: AdamState | None = None, value: float = 0.01) -> None:
    cap = math.log(value / (1 - value))
    np.minimum(scene.opacity_logit, cap, out=scene.opacity_logit)
    if adam is not None:
        adam.m["opacity_logit"][:] = 0.0
        adam.v["opacity_logit"][:] = 0.0


def freeze_dynamic(grads: dict, model: MotionModel) -> None:
    """Restrict gradients to the time-invariant parameters (static stage)."""
    if model.kind == SPLINE:
        # equal control points stay equal: every point gets the summed gradient
        grads["center"][:] = grads["center"].sum(axis=2, keepdims=True)
    else:
        grads["center"][:, :, 1:] = 0.0
    grads["rot"][:, :, 1] = 0.0
    grads["scale_slope"][:] = 0.0


# ------------------------------------------------------------- training loop

@dataclass
class Trainer:
    """Optimizer state for one scene; ``run`` advances the shared iteration counter."""

    scene: Scene
    data: Dataset
    cfg: TrainConfig
    rng: np.random.Generator = None
    split_rng: np.random.Generator = None
    iteration: int = 0
    log: list = field(default_factory=list)
    on_log: Callable[[dict], None] | None = None

    def __post_init__(self):
        ss = np.random.SeedSequence(self.cfg.seed)
        a, b = ss.spawn(2)
        self.rng = self.rng or np.random.default_rng(a)
        self.split_rng = self.split_rng or np.random.default_rng(b)
        self.adam = AdamState.zeros_like(self.scene)
        self.stats = ViewspaceAccumulator.zeros(len(self.scene))
        if not self.data.frames:
            raise ValueError("dataset has no training frames")
        self.probe = self.data.test_frames[0] if self.data.test_frames else self.data.frames[0]

    def _objective(self, frame: Frame, use_flow: bool) -> tuple[Objective, float | None]:
        flows = frame.flow_target() if use_flow else None
        return Objective(frame.image, self.data.background, self.cfg.weights, flows), \
            (self.data.dt if use_flow else None)

    def step(self) -> dict:
        cfg, data = self.cfg, self.data
        static = self.iteration < cfg.static_iters
        frame = data.frames[int(self.rng.integers(len(data.frames)))]
        t = data.time(frame)
        use_flow = (not static) and cfg.lambda_flow > 0 and frame.has_flow
        obj, dt = self._objective(frame, use_flow)
        r = render(self.scene, frame.camera, t, dt)
        terms, img_grads = obj.evaluate(r)
        buf: GradientBuffer = backward(r, *img_grads)
        grads = buf.as_dict()
        if static:
            freeze_dynamic(grads, self.scene.model)
        it = self.iteration + 1  # 1-based, as in the schedule
        if it <= cfg.densify_until:
            self.stats.add(buf, frame.camera.width, frame.camera.height)
        lrs = lr_by_group(cfg, self.iteration, self.scene.extent, self.scene.sh_degree)
        adam_step(self.scene, self.adam, grads, lrs)
        if cfg.densify_from < it <= cfg.densify_until and it % cfg.densify_interval == 0:
            self.scene, self.stats, self.adam = densify_and_prune(
                self.scene, self.stats, cfg, t, self.split_rng, self.adam)
        if (not static and it % cfg.opacity_reset_interval == 0 and it <= cfg.densify_until):
            reset_opacity(self.scene, self.adam)
        self.iteration = it
        rec = {"iter": it, "stage": "static" if static else "dynamic",
               **{k: float(v) for k, v in terms.items()}, "n": len(self.scene)}
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.total_iters):
            rec["psnr_probe"] = frame_psnr(self.scene, self.probe, data)
            self.log.append(rec)
            if self.on_log:
                self.on_log(rec)
        return rec

    def run(self, until: int) -> Scene:
        while self.iteration < until:
            self.step()
        return self.scene


def run_static_stage(scene: Scene, data: Dataset, cfg: TrainConfig, trainer: Trainer | None = None) -> Scene:
    tr = trainer or Trainer(scene, data, cfg)
    return tr.run(cfg.static_iters)


def run_dynamic_stage(scene: Scene, data: Dataset, cfg: TrainConfig, trainer: Trainer | None = None) -> Scene:
    tr = trainer or Trainer(scene, data, cfg, iteration=cfg.static_iters)
    return tr.run(cfg.total_iters)


def train(data: Dataset, cfg: TrainConfig, model: MotionModel, sh_degree: int = 3,
          init: Scene | None = None, on_log=None) -> tuple[Scene, list[dict]]:
    init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    scene = init.copy() if init is not None else random_init(data, cfg, model, sh_degree, init_rng)
    tr = Trainer(scene, data, cfg, on_log=on_log)
    run_static_stage(scene, data, cfg, tr)
    run_dynamic_stage(tr.scene, data, cfg, tr)
    return tr.scene, tr.log


def partition(n_times: int, chunk_size: int | None) -> list[tuple[int, int]]:
    """Consecutive [lo, hi) timestep ranges; oversize chunks collapse to one."""
    if chunk_size is None or chunk_size >= n_times:
        return [(0, n_times)]
    return [(lo, min(lo + chunk_size, n_times)) for lo in range(0, n_times, chunk_size)]


def train_chunked(data: Dataset, cfg: TrainConfig, model: MotionModel, sh_degree: int = 3,
                  on_log=None) -> tuple[ChunkedScene, list[dict]]:
    T = data.n_times
    chunks, log = [], []
    for ci, (lo, hi) in enumerate(partition(T, cfg.chunk_size)):
        sub = data.subset(lo, hi)

        def tag(rec, ci=ci):
            rec["chunk"] = ci
            if on_log:
                on_log(rec)

        scene, clog = train(sub, cfg, model, sh_degree, on_log=tag)
        scene.time_range = (lo / T, hi / T)
        chunks.append((lo / T, hi / T, scene))
        log.extend(clog)
    return ChunkedScene(chunks), log


# ------------------------------------------------------------------ metrics

def render_frame(scene, frame: Frame, data: Dataset) -> np.ndarray:
    t = data.time(frame)
    if isinstance(scene, ChunkedScene):
        sub, t_local, _ = scene.locate(t)
        return render(sub, frame.camera, t_local).composite(data.background)
    return render(scene, frame.camera, t).composite(data.background)


def frame_psnr(scene, frame: Frame, data: Dataset) -> float:
    return float(psnr(np.clip(render_frame(scene, frame, data), 0, 1), frame.image))


def evaluate(scene, frames: list[Frame], data: Dataset) -> dict:
    """Mean PSNR / SSIM of clipped renders over ``frames``."""
    ps, ss = [], []
    for f in frames:
        img = np.clip(render_frame(scene, f, data), 0, 1)
        ps.append(float(psnr(img, f.image)))
        ss.append(ssim(img, f.image))
    return {"psnr": float(np.mean(ps)) if ps else float("nan"),
            "ssim": float(np.mean(ss)) if ss else float("nan"), "n_frames": len(frames)}


# ------------------------------------------------------------------ memory

def static_floats(sh_degree: int) -> int:
    return 3 + 3 * sh_coeff_count(sh_degree) + 1


def baseline_d3dgs_memory(n: int | Scene, T: int, sh_degree: int | None = None) -> int:
    """Bytes for per-timestep center and rotation plus static fields (D-3DGS layout)."""
    if isinstance(n, Scene):
        sh_degree = n.sh_degree if sh_degree is None else sh_degree
        n = len(n)
    return int(n) * (7 * int(T) + static_floats(3 if sh_degree is None else sh_degree)) * BYTES_PER_FLOAT


def scene_bytes(n: int, model: MotionModel, sh_degree: int) -> int:
    return n * param_count_per_gaussian(model, sh_degree) * BYTES_PER_FLOAT


def compression_ratio(model: MotionModel, T: int, sh_degree: int = 3, motion_only: bool = True) -> float:
    motion = 3 * model.n_coeffs + 8
    if motion_only:
        return 7 * T / motion
    return (7 * T + static_floats(sh_degree)) / param_count_per_gaussian(model, sh_degree)

"""In-memory training data: posed frames with times and optional flow."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Camera


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    time_index: int
    camera_id: int = 0
    flow_fwd: np.ndarray | None = None  # (H, W, 2) pixels toward the next timestep
    flow_bwd: np.ndarray | None = None
    mask_fwd: np.ndarray | None = None  # (H, W) bool, valid ground truth
    mask_bwd: np.ndarray | None = None
    name: str = ""

    @property
    def has_flow(self) -> bool:
        return self.flow_fwd is not None and self.flow_bwd is not None

    def flow_target(self):
        H, W = self.image.shape[:2]
        full = np.ones((H, W), dtype=bool)
        return (self.flow_fwd, self.flow_bwd,
                full if self.mask_fwd is None else self.mask_fwd,
                full if self.mask_bwd is None else self.mask_bwd)


@dataclass
class Dataset:
    """Frames over ``n_times`` timesteps; frame time is ``time_index / n_times``."""

    frames: list[Frame]
    n_times: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bbox: np.ndarray | None = None  # (2, 3) min / max corner
    test_frames: list[Frame] = field(default_factory=list)
    init_points: np.ndarray | None = None  # (M, 3)
    init_colors: np.ndarray | None = None  # (M, 3)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def time(self, frame: Frame) -> float:
        return frame.time_index / self.n_times

    @property
    def dt(self) -> float:
        return 1.0 / self.n_times

    def camera_extent(self) -> float:
        """Radius of the camera cloud, padded by 10%."""
        pos = np.array([f.camera.position for f in self.frames])
        r = np.linalg.norm(pos - pos.mean(axis=0), axis=1).max() if len(pos) else 0.0
        return 1.1 * r if r > 0 else 1.0

    def scene_bbox(self) -> np.ndarray:
        if self.bbox is not None:
            return np.asarray(self.bbox, dtype=np.float64)
        if self.init_points is not None and len(self.init_points):
            return np.stack([self.init_points.min(axis=0), self.init_points.max(axis=0)])
        # default: a cube around the origin half the camera radius wide
        r = 0.5 * self.camera_extent() / 1.1
        return np.array([[-r] * 3, [r] * 3])

    def subset(self, lo: int, hi: int) -> "Dataset":
        """Frames with time index in [lo, hi), re-indexed to local time."""
        sel = [f for f in self.frames if lo <= f.time_index < hi]
        frames = [Frame(f.image, f.camera, f.time_index - lo, f.camera_id, f.flow_fwd, f.flow_bwd,
                        f.mask_fwd, f.mask_bwd, f.name) for f in sel]
        tests = [Frame(f.image, f.camera, f.time_index - lo, f.camera_id, f.flow_fwd, f.flow_bwd,
                       f.mask_fwd, f.mask_bwd, f.name)
                 for f in self.test_frames if lo <= f.time_index < hi]
        return Dataset(frames, hi - lo, self.background, self.bbox, tests,
                       self.init_points, self.init_colors)

"""Core scene types: motion models, dynamic Gaussians, scenes and cameras.

Scenes are stored as a struct of arrays (one leading axis over Gaussians)
because every consumer -- rasterizer, optimizer, file writer -- wants the
packed form.  :class:`DynamicGaussian` is the per-primitive view.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

FOURIER = "fourier"
POLYNOMIAL = "polynomial"
SPLINE = "spline"

KIND_CODES = {FOURIER: 0, POLYNOMIAL: 1, SPLINE: 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

MAX_SH_DEGREE = 3


@dataclass(frozen=True)
class MotionModel:
    """Basis used for the time-varying center.

    ``order`` is the harmonic count L for Fourier, the degree for
    Polynomial and the number of control points for Spline.
    """

    kind: str = FOURIER
    order: int = 2
    time_varying_scale: bool = False

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if isinstance(self.order, bool) or int(self.order) != self.order:
            raise ValueError("motion order must be an integer")
        minimum = 2 if self.kind == SPLINE else 1
        if self.order < minimum:
            raise ValueError(f"{self.kind} motion needs order >= {minimum}, got {self.order}")

    @classmethod
    def fourier(cls, L: int, time_varying_scale: bool = False) -> "MotionModel":
        return cls(FOURIER, L, time_varying_scale)

    @classmethod
    def polynomial(cls, degree: int, time_varying_scale: bool = False) -> "MotionModel":
        return cls(POLYNOMIAL, degree, time_varying_scale)

    @classmethod
    def spline(cls, n_control: int, time_varying_scale: bool = False) -> "MotionModel":
        return cls(SPLINE, n_control, time_varying_scale)

    @property
    def n_coeffs(self) -> int:
        """Coefficients stored per center axis."""
        if self.kind == FOURIER:
            return 2 * self.order + 1
        if self.kind == POLYNOMIAL:
            return self.order + 1
        return self.order

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    def describe(self) -> str:
        label = {FOURIER: "L", POLYNOMIAL: "degree", SPLINE: "n_control"}[self.kind]
        extra = ", time-varying scale" if self.time_varying_scale else ""
        return f"{self.kind}({label}={self.order}{extra})"


def sh_coeff_count(sh_degree: int) -> int:
    return (sh_degree + 1) ** 2


def param_count_per_gaussian(model: MotionModel, sh_degree: int) -> int:
    """Number of stored floats per Gaussian.

    center 3*C + rotation 8 + scale 3 + color 3*(k+1)^2 + opacity 1,
    plus 3 scale slopes when the model has time-varying scale.
    """
    if not 0 <= sh_degree <= MAX_SH_DEGREE:
        raise ValueError(f"sh_degree must be in 0..{MAX_SH_DEGREE}")
    count = 3 * model.n_coeffs + 8 + 3 + 3 * sh_coeff_count(sh_degree) + 1
    if model.time_varying_scale:
        count += 3
    return count


@dataclass
class DynamicGaussian:
    center_coeffs: np.ndarray  # (3, C); column 0 is the intercept
    rot_coeffs: np.ndarray  # (4, 2); quaternion (x, y, z, w) intercept, slope
    log_scale: np.ndarray  # (3,)
    sh_coeffs: np.ndarray  # (3, (k+1)^2)
    opacity_logit: float
    scale_slope: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass
class Scene:
    """A set of dynamic Gaussians sharing one motion model and SH degree."""

    model: MotionModel
    sh_degree: int
    center: np.ndarray  # (N, 3, C)
    rot: np.ndarray  # (N, 4, 2)
    log_scale: np.ndarray  # (N, 3)
    scale_slope: np.ndarray  # (N, 3); ignored unless model.time_varying_scale
    sh: np.ndarray  # (N, 3, (k+1)^2)
    opacity_logit: np.ndarray  # (N,)
    time_range: tuple[float, float] = (0.0, 1.0)
    extent: float = 1.0

    FIELDS = ("center", "rot", "log_scale", "scale_slope", "sh", "opacity_logit")

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, _as_f64(getattr(self, name)))
        self.time_range = (float(self.time_range[0]), float(self.time_range[1]))
        self.extent = float(self.extent)

    @classmethod
    def empty(cls, model: MotionModel, sh_degree: int, **kw) -> "Scene":
        C, K = model.n_coeffs, sh_coeff_count(sh_degree)
        return cls(model, sh_degree, np.zeros((0, 3, C)), np.zeros((0, 4, 2)),
                   np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, K)), np.zeros(0), **kw)

    @classmethod
    def from_gaussians(cls, model: MotionModel, sh_degree: int,
                       gaussians: Sequence[DynamicGaussian], **kw) -> "Scene":
        problems = validate_gaussians(model, sh_degree, gaussians)
        if problems:
            raise ValueError("; ".join(str(p) for p in problems))
        if not gaussians:
            return cls.empty(model, sh_degree, **kw)
        return cls(
            model, sh_degree,
            np.stack([g.center_coeffs for g in gaussians]),
            np.stack([g.rot_coeffs for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.scale_slope for g in gaussians]),
            np.stack([g.sh_coeffs for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            **kw,
        )

    def __len__(self) -> int:
        return self.center.shape[0]

    def gaussian(self, i: int) -> DynamicGaussian:
        return DynamicGaussian(self.center[i].copy(), self.rot[i].copy(), self.log_scale[i].copy(),
                               self.sh[i].copy(), float(self.opacity_logit[i]),
                               self.scale_slope[i].copy())

    @property
    def gaussians(self) -> list[DynamicGaussian]:
        return [self.gaussian(i) for i in range(len(self))]

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def copy(self) -> "Scene":
        return replace(self, **{name: getattr(self, name).copy() for name in self.FIELDS})

    def select(self, index) -> "Scene":
        """Subset (or reorder / repeat) Gaussians by an index or mask."""
        return replace(self, **{name: getattr(self, name)[index].copy() for name in self.FIELDS})

    def concat(self, other: "Scene") -> "Scene":
        if other.model != self.model or other.sh_degree != self.sh_degree:
            raise ValueError("model mismatch")
        return replace(self, **{name: np.concatenate([getattr(self, name), getattr(other, name)])
                                for name in self.FIELDS})

    def to_float32_precision(self) -> "Scene":
        """Round every parameter to the nearest float32 (the on-disk precision)."""
        return replace(self, **{name: getattr(self, name).astype(np.float32).astype(np.float64)
                                for name in self.FIELDS})


class Violation(NamedTuple):
    index: int | None
    message: str

    def __str__(self):
        where = "scene" if self.index is None else f"gaussian {self.index}"
        return f"{where}: {self.message}"


def validate_gaussians(model: MotionModel, sh_degree: int,
                       gaussians: Sequence[DynamicGaussian]) -> list[Violation]:
    out = []
    C, K = model.n_coeffs, sh_coeff_count(sh_degree)
    for i, g in enumerate(gaussians):
        if np.shape(g.center_coeffs) != (3, C):
            out.append(Violation(i, f"model mismatch: center coeffs {np.shape(g.center_coeffs)}, expected (3, {C})"))
        if np.shape(g.rot_coeffs) != (4, 2):
            out.append(Violation(i, "rotation coeffs must be (4, 2)"))
        elif not np.linalg.norm(np.asarray(g.rot_coeffs)[:, 0]) > 0:
            out.append(Violation(i, "rotation intercept quaternion is zero"))
        if np.shape(g.sh_coeffs) != (3, K):
            out.append(Violation(i, f"model mismatch: sh coeffs {np.shape(g.sh_coeffs)}, expected (3, {K})"))
        if np.shape(g.log_scale) != (3,) or np.shape(g.scale_slope) != (3,):
            out.append(Violation(i, "scale fields must have 3 entries"))
        arrays = (g.center_coeffs, g.rot_coeffs, g.log_scale, g.sh_coeffs, g.scale_slope, g.opacity_logit)
        if not all(np.all(np.isfinite(np.asarray(a, dtype=float))) for a in arrays):
            out.append(Violation(i, "non-finite parameter"))
    return out


def validate_scene(s: Scene) -> list[Violation]:
    """Every invariant breach in ``s``; an empty list means the scene is valid."""
    out = []
    if not 0 <= s.sh_degree <= MAX_SH_DEGREE:
        out.append(Violation(None, f"sh_degree {s.sh_degree} outside 0..{MAX_SH_DEGREE}"))
    lo, hi = s.time_range
    if not lo < hi:
        out.append(Violation(None, f"time_range {s.time_range} is empty"))
    if not s.extent > 0:
        out.append(Violation(None, f"extent {s.extent} must be positive"))
    N = s.center.shape[0]
    expected = {
        "center": (N, 3, s.model.n_coeffs), "rot": (N, 4, 2), "log_scale": (N, 3),
        "scale_slope": (N, 3), "sh": (N, 3, sh_coeff_count(max(0, min(s.sh_degree, 3)))),
        "opacity_logit": (N,),
    }
    for name, shape in expected.items():
        if getattr(s, name).shape != shape:
            out.append(Violation(None, f"model mismatch: {name} has shape {getattr(s, name).shape}, expected {shape}"))
    if out:
        return out
    zero_rot = np.flatnonzero(~(np.linalg.norm(s.rot[:, :, 0], axis=1) > 0))
    out.extend(Violation(int(i), "rotation intercept quaternion is zero") for i in zero_rot)
    bad = np.zeros(N, dtype=bool)
    for name in Scene.FIELDS:
        a = getattr(s, name)
        bad |= ~np.isfinite(a.reshape(N, -1 if N else 1)).all(axis=1)
    out.extend(Violation(int(i), "non-finite parameter") for i in np.flatnonzero(bad))
    return sorted(out, key=lambda v: (-1 if v.index is None else v.index))


@dataclass
class Camera:
    """Pinhole camera; ``world_to_camera`` maps world points into an
    x-right, y-down, z-forward camera frame."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_camera = _as_f64(self.world_to_camera)
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        R = self.world_to_camera[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5:
            raise ValueError("rotation block of world_to_camera is not orthonormal")
        self.width, self.height = int(self.width), int(self.height)

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
                fx: float, fy: float | None = None, cx: float | None = None,
                cy: float | None = None) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        W = np.eye(4)
        W[:3, :3] = np.stack([right, down, forward])
        W[:3, 3] = -W[:3, :3] @ eye
        return cls(width, height, fx, fx if fy is None else fy,
                   width / 2 if cx is None else cx, height / 2 if cy is None else cy, W)


@dataclass
class ChunkedScene:
    """Independent scenes each owning a half-open slice [t_lo, t_hi) of time.

    Chunk scenes run on local time: t_local = (t - t_lo) / (t_hi - t_lo).
    """

    chunks: list[tuple[float, float, Scene]]

    def __post_init__(self):
        if not self.chunks:
            raise ValueError("chunked scene needs at least one chunk")
        prev_hi = None
        for lo, hi, _ in self.chunks:
            if not lo < hi:
                raise ValueError(f"empty chunk range [{lo}, {hi})")
            if prev_hi is not None and lo < prev_hi:
                raise ValueError("chunk ranges overlap or are unsorted")
            prev_hi = hi

    def locate(self, t: float) -> tuple[Scene, float, float]:
        """Chunk scene owning global time ``t`` plus the local time and the
        local/global time ratio."""
        for lo, hi, scene in self.chunks:
            if lo <= t < hi:
                return scene, (t - lo) / (hi - lo), 1.0 / (hi - lo)
        raise ValueError(f"t={t} is outside every chunk range")

    def __len__(self):
        return len(self.chunks)


# ---------------------------------------------------------------- composition

def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product of (x, y, z, w) quaternions; broadcasts over leading axes."""
    px, py, pz, pw = np.moveaxis(np.asarray(p, dtype=np.float64), -1, 0)
    qx, qy, qz, qw = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
        pw * qw - px * qx - py * qy - pz * qz,
    ], axis=-1)


def _similarity_parts(transform: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    T = np.asarray(transform, dtype=np.float64)
    if T.shape != (4, 4) or np.abs(T[3] - [0, 0, 0, 1]).max() > 1e-9:
        raise ValueError("transform must be a 4x4 affine matrix")
    A = T[:3, :3]
    s = np.cbrt(np.linalg.det(A))
    if not s > 0:
        raise ValueError("non-rigid transform rejected: reflection or singular")
    R = A / s
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
        raise ValueError("non-rigid transform rejected: shear or anisotropic scale")
    return float(s), R, T[:3, 3].copy()


def _shift_time(b: Scene, shift: float) -> Scene:
    """Coefficients of t -> b(t + shift)."""
    out = b.copy()
    kind, C = b.model.kind, b.model.n_coeffs
    if kind == FOURIER:
        for i in range(1, b.model.order + 1):
            w = 2.0 * np.pi * i * shift
            s, c = b.center[:, :, 2 * i - 1], b.center[:, :, 2 * i]
            out.center[:, :, 2 * i - 1] = s * np.cos(w) - c * np.sin(w)
            out.center[:, :, 2 * i] = s * np.sin(w) + c * np.cos(w)
    elif kind == POLYNOMIAL:
        from math import comb
        new = np.zeros_like(b.center)
        for j in range(C):  # sum_j a_j (t + s)^j
            for m in range(j + 1):
                new[:, :, m] += b.center[:, :, j] * comb(j, m) * shift ** (j - m)
        out.center = new
    elif shift != 0.0:
        raise ValueError("time shift is not exactly representable for spline motion")
    out.rot[:, :, 0] = b.rot[:, :, 0] + b.rot[:, :, 1] * shift
    out.log_scale = b.log_scale + b.scale_slope * shift
    return out


def compose(a: Scene, b: Scene, transform=None, time_scale: float = 1.0,
            time_shift: float = 0.0) -> Scene:
    """Insert ``b`` into ``a``.

    ``transform`` is a 4x4 similarity (rotation, uniform scale, translation)
    applied to ``b``; b is played at ``time_scale * t + time_shift``.  Only
    ``time_scale == 1`` is accepted: rescaling time would change the
    Fourier frequencies, which the basis cannot absorb.
    """
    if a.model != b.model or a.sh_degree != b.sh_degree:
        raise ValueError("model mismatch: scenes must share motion model and sh_degree")
    if time_scale != 1.0:
        raise ValueError("only time shifts (time_scale == 1) are supported")
    s, R, trans = _similarity_parts(np.eye(4) if transform is None else transform)
    b2 = _shift_time(b, time_shift) if time_shift else b.copy()
    b2.center = np.einsum("ij,njc->nic", s * R, b2.center)
    if b.model.kind == SPLINE:
        b2.center += trans[None, :, None]
    else:
        b2.center[:, :, 0] += trans
    qR = Rotation.from_matrix(R).as_quat()
    b2.rot = np.stack([quat_multiply(qR, b2.rot[:, :, 0]), quat_multiply(qR, b2.rot[:, :, 1])], axis=-1)
    b2.log_scale = b2.log_scale + np.log(s)
    if b.sh_degree > 0 and not np.array_equal(R, np.eye(3)):
        from .projection import rotate_sh
        b2.sh = rotate_sh(b2.sh, R)
    return a.concat(b2)

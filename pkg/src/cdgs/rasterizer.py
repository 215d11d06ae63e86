"""Tile-based front-to-back alpha blending of projected splats.

Splats are sorted once globally by (depth, index) and binned into 16x16
pixel tiles; every tile then walks its own depth-ordered list.  Any
per-splat feature vector is blended with the same weights, which is how
color and projected scene flow share one pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .projection import Projection, preprocess
from .scene import Camera, ChunkedScene, Scene

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
MAHALANOBIS_MAX = 9.0  # 3-sigma ellipse


def sort_splats(depth: np.ndarray, index: np.ndarray | None = None) -> np.ndarray:
    """Order of splats by ascending depth, ties by ascending Gaussian index."""
    depth = np.asarray(depth)
    if index is None:
        index = np.arange(depth.shape[0])
    return np.lexsort((np.asarray(index), depth))


@njit(cache=True)
def _tile_range(m, e, size, tile, n_tiles):
    # pixels whose centers (j + 0.5) fall inside [m - e, m + e]
    lo = int(np.ceil(m - e - 0.5))
    hi = int(np.floor(m + e - 0.5))
    if lo < 0:
        lo = 0
    if hi > size - 1:
        hi = size - 1
    if hi < lo:
        return 0, -1
    return lo // tile, hi // tile


@njit(cache=True)
def _bin_splats(order, means, ext, W, H, tile):
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    counts = np.zeros(ntx * nty + 1, np.int64)
    for g in order:
        x0, x1 = _tile_range(means[g, 0], ext[g, 0], W, tile, ntx)
        y0, y1 = _tile_range(means[g, 1], ext[g, 1], H, tile, nty)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx + 1] += 1
    ptr = np.cumsum(counts)
    ids = np.empty(ptr[-1], np.int64)
    fill = ptr[:-1].copy()
    for g in order:
        x0, x1 = _tile_range(means[g, 0], ext[g, 0], W, tile, ntx)
        y0, y1 = _tile_range(means[g, 1], ext[g, 1], H, tile, nty)
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                k = ty * ntx + tx
                ids[fill[k]] = g
                fill[k] += 1
    return ptr, ids


@njit(cache=True)
def _gather_tile(s, e, ids, means, conic, opacity, feats):
    # contiguous per-tile copies keep the per-pixel loop cache friendly
    n = e - s
    F = feats.shape[1]
    lm = np.empty((n, 5))
    lf = np.empty((n, F))
    lo = np.empty(n)
    for j in range(n):
        g = ids[s + j]
        lm[j, 0] = means[g, 0]
        lm[j, 1] = means[g, 1]
        lm[j, 2] = conic[g, 0]
        lm[j, 3] = conic[g, 1]
        lm[j, 4] = conic[g, 2]
        lo[j] = opacity[g]
        for f in range(F):
            lf[j, f] = feats[g, f]
    return lm, lo, lf


@njit(parallel=True, cache=True, fastmath=True)
def _raster_forward(ptr, ids, means, conic, opacity, feats, W, H, tile,
                    out, T_final, n_contrib, last):
    ntx = (W + tile - 1) // tile
    n_tiles = ptr.shape[0] - 1
    F = feats.shape[1]
    for ti in prange(n_tiles):
        y0 = (ti // ntx) * tile
        x0 = (ti % ntx) * tile
        s = ptr[ti]
        e = ptr[ti + 1]
        lm, lo, lf = _gather_tile(s, e, ids, means, conic, opacity, feats)
        acc = np.empty(F)
        for py in range(y0, min(y0 + tile, H)):
            for px in range(x0, min(x0 + tile, W)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                cnt = 0
                stop = 0
                for f in range(F):
                    acc[f] = 0.0
                for j in range(e - s):
                    dx = fx - lm[j, 0]
                    dy = fy - lm[j, 1]
                    m2 = lm[j, 2] * dx * dx + 2.0 * lm[j, 3] * dx * dy + lm[j, 4] * dy * dy
                    if m2 > MAHALANOBIS_MAX:
                        continue
                    a = lo[j] * np.exp(-0.5 * m2)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    w = a * T
                    for f in range(F):
                        acc[f] += lf[j, f] * w
                    T *= 1.0 - a
                    cnt += 1
                    stop = j + 1
                    if T < T_MIN:
                        break
                for f in range(F):
                    out[py, px, f] = acc[f]
                T_final[py, px] = T
                n_contrib[py, px] = cnt
                last[py, px] = s + stop


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    per_pixel_contrib_count: np.ndarray  # (H, W)


@dataclass
class FlowOutput:
    fwd: np.ndarray  # (H, W, 2) pixels per frame step
    bwd: np.ndarray  # (H, W, 2)


@dataclass
class Rendered:
    """Full forward state; also what the backward pass consumes."""

    scene: Scene
    camera: Camera
    proj: Projection
    feats: np.ndarray
    ptr: np.ndarray
    ids: np.ndarray
    image: np.ndarray  # (H, W, F) blended features
    T_final: np.ndarray
    n_contrib: np.ndarray
    last: np.ndarray
    with_flow: bool

    @property
    def color(self) -> np.ndarray:
        return self.image[:, :, :3]

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.T_final

    @property
    def flow(self) -> FlowOutput | None:
        if not self.with_flow:
            return None
        return FlowOutput(self.image[:, :, 3:5], self.image[:, :, 5:7])

    def output(self) -> RenderOutput:
        return RenderOutput(self.color, self.alpha, self.n_contrib)

    def composite(self, background) -> np.ndarray:
        """Color over a constant background."""
        bg = np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
        return self.color + self.T_final[:, :, None] * bg


def render(scene: Scene, cam: Camera, t: float, dt: float | None = None,
           with_color: bool = True) -> Rendered:
    """Rasterize ``scene`` at time ``t``; ``dt`` adds the flow channels."""
    proj = preprocess(scene, cam, t, dt)
    vis = np.flatnonzero(proj.visible)
    order = vis[sort_splats(proj.depth[vis], vis)]
    W, H = cam.width, cam.height
    ptr, ids = _bin_splats(order, proj.means, proj.ext, W, H, TILE)
    parts = [proj.color] if with_color else [np.zeros((len(scene), 3))]
    if dt is not None:
        parts.append(proj.flow)
    feats = np.ascontiguousarray(np.concatenate(parts, axis=1))
    image = np.zeros((H, W, feats.shape[1]))
    T_final = np.ones((H, W))
    n_contrib = np.zeros((H, W), np.int32)
    last = np.zeros((H, W), np.int64)
    _raster_forward(ptr, ids, proj.means, proj.conic, proj.opacity, feats, W, H, TILE,
                    image, T_final, n_contrib, last)
    return Rendered(scene, cam, proj, feats, ptr, ids, image, T_final, n_contrib, last,
                    dt is not None)


def render_color(scene: Scene, cam: Camera, t: float) -> RenderOutput:
    return render(scene, cam, t).output()


def render_flow(scene: Scene, cam: Camera, t: float, dt: float) -> FlowOutput:
    return render(scene, cam, t, dt).flow


def render_chunked(cs: ChunkedScene, cam: Camera, t: float) -> RenderOutput:
    scene, t_local, _ = cs.locate(t)
    return render_color(scene, cam, t_local)


def render_chunked_full(cs: ChunkedScene, cam: Camera, t: float, dt: float | None = None) -> Rendered:
    """Like :func:`render_chunked` but keeps flow; ``dt`` is in global time."""
    scene, t_local, ratio = cs.locate(t)
    return render(scene, cam, t_local, None if dt is None else dt * ratio)

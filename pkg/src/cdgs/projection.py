"""From a dynamic 3D Gaussian at time t to its screen-space splat.

Conventions: camera frame is x-right, y-down, z-forward; pixel (row i,
column j) has its center at (j + 0.5, i + 0.5); the projected covariance
is in pixel units because the focal lengths are folded into the
projection Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .motion import DegenerateRotationError, basis
from .scene import Camera, DynamicGaussian, MotionModel, Scene, sh_coeff_count

NEAR_PLANE = 0.01
LOWPASS = 0.3
SIGMA_CUTOFF = 3.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

# status codes written by the preprocessing kernel
CULLED, VISIBLE, DEGENERATE = 0, 1, -1


# ------------------------------------------------------------------ numba helpers

@njit(cache=True)
def _mm(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += A[i, l] * B[l, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _quat_to_rotmat(q, R):
    x, y, z, w = q[0], q[1], q[2], q[3]
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(cache=True)
def _rotmat_vjp(q, G, out):
    """Pull a gradient on R(q) back to the (unit) quaternion q."""
    x, y, z, w = q[0], q[1], q[2], q[3]
    out[0] = (2.0 * (y * (G[0, 1] + G[1, 0]) + z * (G[0, 2] + G[2, 0]) + w * (G[2, 1] - G[1, 2]))
              - 4.0 * x * (G[1, 1] + G[2, 2]))
    out[1] = (2.0 * (x * (G[0, 1] + G[1, 0]) + w * (G[0, 2] - G[2, 0]) + z * (G[1, 2] + G[2, 1]))
              - 4.0 * y * (G[0, 0] + G[2, 2]))
    out[2] = (2.0 * (w * (G[1, 0] - G[0, 1]) + x * (G[0, 2] + G[2, 0]) + y * (G[1, 2] + G[2, 1]))
              - 4.0 * z * (G[0, 0] + G[1, 1]))
    out[3] = 2.0 * (z * (G[1, 0] - G[0, 1]) + y * (G[0, 2] - G[2, 0]) + x * (G[2, 1] - G[1, 2]))


@njit(cache=True)
def _sh_basis(d, K, Y):
    x, y, z = d[0], d[1], d[2]
    Y[0] = SH_C0
    if K > 1:
        Y[1] = -SH_C1 * y
        Y[2] = SH_C1 * z
        Y[3] = -SH_C1 * x
    if K > 4:
        xx, yy, zz = x * x, y * y, z * z
        Y[4] = SH_C2[0] * x * y
        Y[5] = SH_C2[1] * y * z
        Y[6] = SH_C2[2] * (2.0 * zz - xx - yy)
        Y[7] = SH_C2[3] * x * z
        Y[8] = SH_C2[4] * (xx - yy)
    if K > 9:
        Y[9] = SH_C3[0] * y * (3.0 * xx - yy)
        Y[10] = SH_C3[1] * x * y * z
        Y[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        Y[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        Y[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        Y[14] = SH_C3[5] * z * (xx - yy)
        Y[15] = SH_C3[6] * x * (xx - 3.0 * yy)


@njit(cache=True)
def _sh_basis_grad(d, K, dY):
    """d Y_k / d(x, y, z) of the polynomial form of each basis function."""
    x, y, z = d[0], d[1], d[2]
    for k in range(K):
        for j in range(3):
            dY[k, j] = 0.0
    if K > 1:
        dY[1, 1] = -SH_C1
        dY[2, 2] = SH_C1
        dY[3, 0] = -SH_C1
    if K > 4:
        dY[4, 0] = SH_C2[0] * y
        dY[4, 1] = SH_C2[0] * x
        dY[5, 1] = SH_C2[1] * z
        dY[5, 2] = SH_C2[1] * y
        dY[6, 0] = -2.0 * SH_C2[2] * x
        dY[6, 1] = -2.0 * SH_C2[2] * y
        dY[6, 2] = 4.0 * SH_C2[2] * z
        dY[7, 0] = SH_C2[3] * z
        dY[7, 2] = SH_C2[3] * x
        dY[8, 0] = 2.0 * SH_C2[4] * x
        dY[8, 1] = -2.0 * SH_C2[4] * y
    if K > 9:
        xx, yy, zz = x * x, y * y, z * z
        dY[9, 0] = SH_C3[0] * 6.0 * x * y
        dY[9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        dY[10, 0] = SH_C3[1] * y * z
        dY[10, 1] = SH_C3[1] * x * z
        dY[10, 2] = SH_C3[1] * x * y
        dY[11, 0] = SH_C3[2] * (-2.0 * x * y)
        dY[11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        dY[11, 2] = SH_C3[2] * 8.0 * y * z
        dY[12, 0] = SH_C3[3] * (-6.0 * x * z)
        dY[12, 1] = SH_C3[3] * (-6.0 * y * z)
        dY[12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        dY[13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        dY[13, 1] = SH_C3[4] * (-2.0 * x * y)
        dY[13, 2] = SH_C3[4] * 8.0 * x * z
        dY[14, 0] = SH_C3[5] * 2.0 * x * z
        dY[14, 1] = SH_C3[5] * (-2.0 * y * z)
        dY[14, 2] = SH_C3[5] * (xx - yy)
        dY[15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        dY[15, 1] = SH_C3[6] * (-6.0 * x * y)


@njit(cache=True)
def _gaussian_state(n, center, rot, log_scale, scale_slope, b, t, tvs, q, s, R, mu):
    """Center, unit quaternion, scale and rotation matrix of Gaussian n at t.

    Returns the norm of the raw (unnormalized) quaternion.
    """
    C = b.shape[0]
    for i in range(3):
        acc = 0.0
        for c in range(C):
            acc += center[n, i, c] * b[c]
        mu[i] = acc
    nq = 0.0
    for i in range(4):
        q[i] = rot[n, i, 0] + rot[n, i, 1] * t
        nq += q[i] * q[i]
    nq = np.sqrt(nq)
    if nq >= 1e-8:
        for i in range(4):
            q[i] /= nq
    for i in range(3):
        ls = log_scale[n, i]
        if tvs:
            ls += scale_slope[n, i] * t
        s[i] = np.exp(ls)
    _quat_to_rotmat(q, R)
    return nq


@njit(parallel=True, cache=True)
def _preprocess_kernel(center, rot, log_scale, scale_slope, sh, opacity_logit,
                       b, dbf, dbb, t, tvs, Rw, tw, campos, fx, fy, cx, cy, W, H, near,
                       status, means, cov2d, conic, depth, color, opacity, ext, flow):
    N = center.shape[0]
    K = sh.shape[2]
    C = b.shape[0]
    for n in prange(N):
        q = np.empty(4)
        s = np.empty(3)
        R = np.empty((3, 3))
        mu = np.empty(3)
        nq = _gaussian_state(n, center, rot, log_scale, scale_slope, b, t, tvs, q, s, R, mu)
        status[n] = CULLED
        if nq < 1e-8:
            status[n] = DEGENERATE
            continue
        v = np.empty(3)
        for i in range(3):
            v[i] = Rw[i, 0] * mu[0] + Rw[i, 1] * mu[1] + Rw[i, 2] * mu[2] + tw[i]
        vz = v[2]
        depth[n] = vz
        if vz <= near:
            continue
        J = np.zeros((2, 3))
        J[0, 0] = fx / vz
        J[0, 2] = -fx * v[0] / (vz * vz)
        J[1, 1] = fy / vz
        J[1, 2] = -fy * v[1] / (vz * vz)
        T = _mm(J, Rw)
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                M[i, j] = R[i, j] * s[j]
        TM = _mm(T, M)
        a = TM[0, 0] ** 2 + TM[0, 1] ** 2 + TM[0, 2] ** 2 + LOWPASS
        bb = TM[0, 0] * TM[1, 0] + TM[0, 1] * TM[1, 1] + TM[0, 2] * TM[1, 2]
        c = TM[1, 0] ** 2 + TM[1, 1] ** 2 + TM[1, 2] ** 2 + LOWPASS
        det = a * c - bb * bb
        mx = fx * v[0] / vz + cx
        my = fy * v[1] / vz + cy
        ex = SIGMA_CUTOFF * np.sqrt(a)
        ey = SIGMA_CUTOFF * np.sqrt(c)
        means[n, 0] = mx
        means[n, 1] = my
        cov2d[n, 0] = a
        cov2d[n, 1] = bb
        cov2d[n, 2] = c
        conic[n, 0] = c / det
        conic[n, 1] = -bb / det
        conic[n, 2] = a / det
        ext[n, 0] = ex
        ext[n, 1] = ey
        if mx + ex < 0.0 or mx - ex > W or my + ey < 0.0 or my - ey > H:
            continue
        status[n] = VISIBLE
        # view-dependent color
        d = np.empty(3)
        dn = 0.0
        for i in range(3):
            d[i] = mu[i] - campos[i]
            dn += d[i] * d[i]
        dn = np.sqrt(dn)
        for i in range(3):
            d[i] /= dn
        Y = np.empty(K)
        _sh_basis(d, K, Y)
        for ch in range(3):
            raw = 0.5
            for k in range(K):
                raw += sh[n, ch, k] * Y[k]
            color[n, ch] = min(max(raw, 0.0), 1.0)
        opacity[n] = 1.0 / (1.0 + np.exp(-opacity_logit[n]))
        # projected scene flow, forward then backward
        for side in range(2):
            db = dbf if side == 0 else dbb
            f = np.zeros(3)
            for i in range(3):
                acc = 0.0
                for cc in range(C):
                    acc += center[n, i, cc] * db[cc]
                f[i] = acc
            for r in range(2):
                flow[n, 2 * side + r] = T[r, 0] * f[0] + T[r, 1] * f[1] + T[r, 2] * f[2]


@njit(parallel=True, cache=True)
def _preprocess_backward_kernel(center, rot, log_scale, scale_slope, sh, opacity_logit,
                                b, dbf, dbb, t, tvs, Rw, tw, campos, fx, fy,
                                status, g_mean, g_conic, g_color, g_opacity, g_flow,
                                d_center, d_rot, d_log_scale, d_scale_slope, d_sh, d_opacity_logit):
    N = center.shape[0]
    K = sh.shape[2]
    C = b.shape[0]
    for n in prange(N):
        if status[n] != VISIBLE:
            continue
        q = np.empty(4)
        s = np.empty(3)
        R = np.empty((3, 3))
        mu = np.empty(3)
        nq = _gaussian_state(n, center, rot, log_scale, scale_slope, b, t, tvs, q, s, R, mu)
        v = np.empty(3)
        for i in range(3):
            v[i] = Rw[i, 0] * mu[0] + Rw[i, 1] * mu[1] + Rw[i, 2] * mu[2] + tw[i]
        vz = v[2]
        J = np.zeros((2, 3))
        J[0, 0] = fx / vz
        J[0, 2] = -fx * v[0] / (vz * vz)
        J[1, 1] = fy / vz
        J[1, 2] = -fy * v[1] / (vz * vz)
        T = _mm(J, Rw)
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                M[i, j] = R[i, j] * s[j]
        Sigma = _mm(M, M.T.copy())
        cov = _mm(_mm(T, Sigma), T.T.copy())
        a = cov[0, 0] + LOWPASS
        bb = cov[0, 1]
        c = cov[1, 1] + LOWPASS
        det = a * c - bb * bb
        inv2 = 1.0 / (det * det)
        gA, gB, gC = g_conic[n, 0], g_conic[n, 1], g_conic[n, 2]
        ga = (-gA * c * c + gB * bb * c - gC * bb * bb) * inv2
        gb = (2.0 * gA * bb * c - gB * (a * c + bb * bb) + 2.0 * gC * a * bb) * inv2
        gc = (-gA * bb * bb + gB * a * bb - gC * a * a) * inv2
        Gs = np.empty((2, 2))
        Gs[0, 0] = ga
        Gs[0, 1] = 0.5 * gb
        Gs[1, 0] = 0.5 * gb
        Gs[1, 1] = gc
        dSigma = _mm(_mm(T.T.copy(), Gs), T)
        dT = 2.0 * _mm(_mm(Gs, T), Sigma)
        # scene flow contributions
        dmu = np.zeros(3)
        dfs = np.zeros((2, 3))
        for side in range(2):
            db = dbf if side == 0 else dbb
            f = np.zeros(3)
            for i in range(3):
                acc = 0.0
                for cc in range(C):
                    acc += center[n, i, cc] * db[cc]
                f[i] = acc
            g0 = g_flow[n, 2 * side]
            g1 = g_flow[n, 2 * side + 1]
            for i in range(3):
                dT[0, i] += g0 * f[i]
                dT[1, i] += g1 * f[i]
                dfs[side, i] = T[0, i] * g0 + T[1, i] * g1
        dJ = _mm(dT, Rw.T.copy())
        dv = np.zeros(3)
        ivz2 = 1.0 / (vz * vz)
        dv[0] += dJ[0, 2] * (-fx * ivz2)
        dv[1] += dJ[1, 2] * (-fy * ivz2)
        dv[2] += (dJ[0, 0] * (-fx * ivz2) + dJ[0, 2] * (2.0 * fx * v[0] * ivz2 / vz)
                  + dJ[1, 1] * (-fy * ivz2) + dJ[1, 2] * (2.0 * fy * v[1] * ivz2 / vz))
        gmx, gmy = g_mean[n, 0], g_mean[n, 1]
        dv[0] += gmx * fx / vz
        dv[1] += gmy * fy / vz
        dv[2] += -gmx * fx * v[0] * ivz2 - gmy * fy * v[1] * ivz2
        for i in range(3):
            dmu[i] += Rw[0, i] * dv[0] + Rw[1, i] * dv[1] + Rw[2, i] * dv[2]
        # color through SH and the view direction
        d = np.empty(3)
        dn = 0.0
        for i in range(3):
            d[i] = mu[i] - campos[i]
            dn += d[i] * d[i]
        dn = np.sqrt(dn)
        for i in range(3):
            d[i] /= dn
        Y = np.empty(K)
        _sh_basis(d, K, Y)
        dY = np.empty((K, 3))
        _sh_basis_grad(d, K, dY)
        ddir = np.zeros(3)
        for ch in range(3):
            raw = 0.5
            for k in range(K):
                raw += sh[n, ch, k] * Y[k]
            gch = g_color[n, ch]
            if raw < 0.0 or raw > 1.0:
                gch = 0.0
            for k in range(K):
                d_sh[n, ch, k] = gch * Y[k]
                for j in range(3):
                    ddir[j] += gch * sh[n, ch, k] * dY[k, j]
        proj = ddir[0] * d[0] + ddir[1] * d[1] + ddir[2] * d[2]
        for i in range(3):
            dmu[i] += (ddir[i] - d[i] * proj) / dn
        for i in range(3):
            for cc in range(C):
                d_center[n, i, cc] = dmu[i] * b[cc] + dfs[0, i] * dbf[cc] + dfs[1, i] * dbb[cc]
        # covariance: Sigma = M M^T, M = R diag(s)
        dM = 2.0 * _mm(dSigma, M)
        dR = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                dR[i, j] = dM[i, j] * s[j]
        for j in range(3):
            ds = dM[0, j] * R[0, j] + dM[1, j] * R[1, j] + dM[2, j] * R[2, j]
            dls = ds * s[j]
            d_log_scale[n, j] = dls
            d_scale_slope[n, j] = dls * t if tvs else 0.0
        dq = np.empty(4)
        _rotmat_vjp(q, dR, dq)
        qd = dq[0] * q[0] + dq[1] * q[1] + dq[2] * q[2] + dq[3] * q[3]
        for i in range(4):
            g = (dq[i] - q[i] * qd) / nq
            d_rot[n, i, 0] = g
            d_rot[n, i, 1] = g * t
        o = 1.0 / (1.0 + np.exp(-opacity_logit[n]))
        d_opacity_logit[n] = g_opacity[n] * o * (1.0 - o)


# ------------------------------------------------------------------ batch API

@dataclass
class Projection:
    """Screen-space splats for every Gaussian of a scene at one time."""

    status: np.ndarray  # (N,) CULLED / VISIBLE / DEGENERATE
    means: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 3) a, b, c of [[a, b], [b, c]]
    conic: np.ndarray  # (N, 3) inverse covariance, same layout
    depth: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    ext: np.ndarray  # (N, 2) 3-sigma half extents in x and y
    flow: np.ndarray  # (N, 4) fwd (x, y), bwd (x, y) in pixels
    # inputs retained for the backward pass
    basis: np.ndarray
    dbasis_fwd: np.ndarray
    dbasis_bwd: np.ndarray
    t: float

    @property
    def visible(self) -> np.ndarray:
        return self.status == VISIBLE


def _camera_args(cam: Camera):
    return (np.ascontiguousarray(cam.R), np.ascontiguousarray(cam.t), cam.position,
            float(cam.fx), float(cam.fy))


def preprocess(scene: Scene, cam: Camera, t: float, dt: float | None = None) -> Projection:
    """Project all Gaussians; ``dt`` enables the per-splat scene-flow terms."""
    N = len(scene)
    b = basis(scene.model, t)
    if dt is None:
        dbf = np.zeros_like(b)
        dbb = np.zeros_like(b)
    else:
        dbf = basis(scene.model, t + dt) - b
        dbb = b - basis(scene.model, t - dt)
    K = sh_coeff_count(scene.sh_degree)
    out = Projection(
        status=np.zeros(N, np.int8), means=np.zeros((N, 2)), cov2d=np.zeros((N, 3)),
        conic=np.zeros((N, 3)), depth=np.zeros(N), color=np.zeros((N, 3)), opacity=np.zeros(N),
        ext=np.zeros((N, 2)), flow=np.zeros((N, 4)), basis=b, dbasis_fwd=dbf, dbasis_bwd=dbb,
        t=float(t),
    )
    if N == 0:
        return out
    Rw, tw, campos, fx, fy = _camera_args(cam)
    _preprocess_kernel(scene.center, scene.rot, scene.log_scale, scene.scale_slope,
                       np.ascontiguousarray(scene.sh[:, :, :K]), scene.opacity_logit,
                       b, dbf, dbb, float(t), scene.model.time_varying_scale, Rw, tw, campos,
                       fx, fy, float(cam.cx), float(cam.cy), float(cam.width), float(cam.height),
                       NEAR_PLANE, out.status, out.means, out.cov2d, out.conic, out.depth,
                       out.color, out.opacity, out.ext, out.flow)
    bad = np.flatnonzero(out.status == DEGENERATE)
    if bad.size:
        raise DegenerateRotationError(int(bad[0]), t)
    return out


def preprocess_backward(scene: Scene, cam: Camera, proj: Projection, g_mean, g_conic,
                        g_color, g_opacity, g_flow) -> dict[str, np.ndarray]:
    """Chain splat-level gradients back to every scene parameter."""
    N = len(scene)
    grads = {name: np.zeros_like(getattr(scene, name)) for name in Scene.FIELDS}
    if N == 0:
        return grads
    Rw, tw, campos, fx, fy = _camera_args(cam)
    _preprocess_backward_kernel(
        scene.center, scene.rot, scene.log_scale, scene.scale_slope,
        np.ascontiguousarray(scene.sh), scene.opacity_logit, proj.basis, proj.dbasis_fwd,
        proj.dbasis_bwd, proj.t, scene.model.time_varying_scale, Rw, tw, campos, fx, fy,
        proj.status, np.ascontiguousarray(g_mean), np.ascontiguousarray(g_conic),
        np.ascontiguousarray(g_color), np.ascontiguousarray(g_opacity), np.ascontiguousarray(g_flow),
        grads["center"], grads["rot"], grads["log_scale"], grads["scale_slope"], grads["sh"],
        grads["opacity_logit"])
    return grads


# ------------------------------------------------------------------ single-Gaussian API

@dataclass
class Splat2D:
    mean_px: np.ndarray
    cov2d: np.ndarray  # (2, 2)
    depth: float
    color: np.ndarray
    opacity: float
    gaussian_index: int


def world_to_camera(cam: Camera, p) -> np.ndarray:
    return cam.R @ np.asarray(p, dtype=np.float64) + cam.t


def projection_jacobian(cam: Camera, v, near: float = NEAR_PLANE) -> np.ndarray | None:
    """Affine-projection Jacobian at camera-space point ``v`` (pixel units).

    Returns None (culled) when the point is not in front of the near plane.
    """
    vx, vy, vz = (float(x) for x in v)
    if vz <= near:
        return None
    return np.array([
        [cam.fx / vz, 0.0, -cam.fx * vx / vz ** 2],
        [0.0, cam.fy / vz, -cam.fy * vy / vz ** 2],
        [0.0, 0.0, 0.0],
    ])


def quat_to_rotmat(q) -> np.ndarray:
    R = np.empty((3, 3))
    _quat_to_rotmat(np.asarray(q, dtype=np.float64), R)
    return R


def build_covariance(q, scale) -> np.ndarray:
    M = quat_to_rotmat(q) * np.asarray(scale, dtype=np.float64)[None, :]
    return M @ M.T


def project_covariance(J, W_rot, cov3d) -> np.ndarray:
    T = np.asarray(J)[:2] @ np.asarray(W_rot)
    cov = T @ np.asarray(cov3d) @ T.T
    return 0.5 * (cov + cov.T) + LOWPASS * np.eye(2)


def sh_basis(direction, sh_degree: int) -> np.ndarray:
    K = sh_coeff_count(sh_degree)
    Y = np.empty(K)
    _sh_basis(np.asarray(direction, dtype=np.float64), K, Y)
    return Y


def sh_to_color(sh_coeffs, view_dir, sh_degree: int) -> np.ndarray:
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    K = sh_coeff_count(sh_degree)
    raw = sh_coeffs[:, :K] @ sh_basis(view_dir, sh_degree) + 0.5
    return np.clip(raw, 0.0, 1.0)


def project_gaussian(g: DynamicGaussian, model: MotionModel, cam: Camera, t: float,
                     index: int = 0) -> Splat2D | None:
    K = g.sh_coeffs.shape[1]
    sh_degree = int(round(np.sqrt(K))) - 1
    scene = Scene.from_gaussians(model, sh_degree, [g])
    proj = preprocess(scene, cam, t)
    if proj.status[0] != VISIBLE:
        return None
    a, b, c = proj.cov2d[0]
    return Splat2D(proj.means[0].copy(), np.array([[a, b], [b, c]]), float(proj.depth[0]),
                   proj.color[0].copy(), float(proj.opacity[0]), index)


# ------------------------------------------------------------------ SH rotation

def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def rotate_sh(sh: np.ndarray, R: np.ndarray) -> np.ndarray:
    """SH coefficients of the color field rotated by ``R``.

    The new coefficients reproduce, at world direction d, the old color at
    R^T d.  Each band transforms linearly; its matrix is recovered exactly
    by least squares over a spread of sample directions.
    """
    sh = np.asarray(sh, dtype=np.float64)
    K = sh.shape[-1]
    degree = int(round(np.sqrt(K))) - 1
    dirs = _fibonacci_sphere(64)
    Y = np.stack([sh_basis(d, degree) for d in dirs])
    Yr = np.stack([sh_basis(np.asarray(R).T @ d, degree) for d in dirs])
    out = sh.copy()
    for band in range(1, degree + 1):
        sl = slice(band * band, (band + 1) * (band + 1))
        Dt, *_ = np.linalg.lstsq(Y[:, sl], Yr[:, sl], rcond=None)
        out[..., sl] = sh[..., sl] @ Dt.T
    return out

"""Analytic Jacobian of rendered pixel colours with respect to raw scene parameters.

Derivatives are propagated in reverse through compositing, the kernel,
EWA projection and the activations (sigmoid opacity, exp scale, normalized
quaternion, clamped SH colour). Clamped alphas and clamped colours get a
zero local derivative, and the depth order is treated as locally constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _raster
from .render import Projection, RasterInputs, project_scene, projection_jacobian, raster_inputs, render
from .scene import FULL_MASK, CameraView, Image, ParamMask, Scene, quat_to_rotmat
from .sh import eval_colors

CHANNELS = ("R", "G", "B")


def _drot_dq(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions ``q (N,4)``, shape ``(N,4,3,3)``.

    Includes the normalization ``q/|q|`` so it is the derivative with respect
    to the raw four components evaluated at a unit quaternion.
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], -2)
    dx = np.stack([np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], -2)
    dy = np.stack([np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1), np.stack([-w, z, -2 * y], -1)], -2)
    dz = np.stack([np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, o], -1)], -2)
    d_unit = 2.0 * np.stack([dw, dx, dy, dz], axis=1)
    proj = np.eye(4)[None] - q[:, :, None] * q[:, None, :]
    return np.einsum("nkab,nki->niab", d_unit, proj)


def splat_geometry_jacobian(scene: Scene, cam: CameraView, proj: Projection) -> np.ndarray:
    """``(G, 5, 10)``: d(mean_x, mean_y, cov_xx, cov_xy, cov_yy) / d(position, rotation, log_scale)."""
    n = len(scene)
    K = np.zeros((n, 5, 10))
    if n == 0:
        return K
    W = cam.rotation
    t = proj.t_cam.copy()
    t[~proj.visible, 2] = 1.0
    A = projection_jacobian(t, cam)
    M = A @ W
    R = quat_to_rotmat(scene.rotations)
    s2 = np.exp(2.0 * scene.log_scales)
    cov3 = np.einsum("nij,nj,nkj->nik", R, s2, R)

    def sym3(d):  # (N,2,2) -> (N,3)
        return np.stack([d[:, 0, 0], d[:, 0, 1], d[:, 1, 1]], axis=1)

    # position: through the mean and through A(t)
    K[:, 0:2, 0:3] = M
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    dA_dt = np.zeros((n, 3, 2, 3))
    dA_dt[:, 0, 0, 2] = -cam.fx / tz**2
    dA_dt[:, 1, 1, 2] = -cam.fy / tz**2
    dA_dt[:, 2, 0, 0] = -cam.fx / tz**2
    dA_dt[:, 2, 0, 2] = 2 * cam.fx * tx / tz**3
    dA_dt[:, 2, 1, 1] = -cam.fy / tz**2
    dA_dt[:, 2, 1, 2] = 2 * cam.fy * ty / tz**3
    MS = M @ cov3
    for j in range(3):
        dA = np.einsum("niab,i->nab", dA_dt, W[:, j])
        dM = dA @ W
        dS = dM @ np.transpose(MS, (0, 2, 1))
        K[:, 2:5, j] = sym3(dS + np.transpose(dS, (0, 2, 1)))
    # rotation
    dR = _drot_dq(scene.rotations)
    for i in range(4):
        dRS = np.einsum("nab,nb,ncb->nac", dR[:, i], s2, R)
        dcov = dRS + np.transpose(dRS, (0, 2, 1))
        K[:, 2:5, 3 + i] = sym3(M @ dcov @ np.transpose(M, (0, 2, 1)))
    # log-scale
    for k in range(3):
        r = R[:, :, k]
        dcov = 2.0 * s2[:, k, None, None] * r[:, :, None] * r[:, None, :]
        K[:, 2:5, 7 + k] = sym3(M @ dcov @ np.transpose(M, (0, 2, 1)))
    K[~proj.visible] = 0.0
    return K


@dataclass(frozen=True)
class JacobianRow:
    pixel: tuple[int, int]
    channel: str
    entries: dict


@dataclass(frozen=True, eq=False)
class ViewJacobian:
    """Sparse Jacobian of one view, stored per active (pixel, Gaussian) pair.

    ``values[m, ch, :]`` holds the derivatives of channel ``ch`` of pixel
    ``pixel[m]`` with respect to the masked parameters of Gaussian
    ``gaussian[m]``. Pairs are ordered by pixel (row-major), front-to-back.
    """

    view_id: str
    width: int
    height: int
    n_gaussians: int
    sh_degree: int
    mask: ParamMask
    pixel: np.ndarray
    gaussian: np.ndarray
    values: np.ndarray
    _grams: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def per_gaussian(self) -> int:
        return self.mask.per_gaussian(self.sh_degree)

    @property
    def n_params(self) -> int:
        return self.n_gaussians * self.per_gaussian

    @property
    def n_rows(self) -> int:
        return 3 * self.width * self.height

    def is_empty(self) -> bool:
        return len(self.pixel) == 0 or not np.any(self.values)

    def scaled(self, s: float) -> "ViewJacobian":
        return ViewJacobian(self.view_id, self.width, self.height, self.n_gaussians,
                            self.sh_degree, self.mask, self.pixel, self.gaussian, self.values * s)

    def with_id(self, view_id: str) -> "ViewJacobian":
        return ViewJacobian(view_id, self.width, self.height, self.n_gaussians, self.sh_degree,
                            self.mask, self.pixel, self.gaussian, self.values)

    def rows(self) -> Iterator[JacobianRow]:
        """Non-empty rows, row-major pixels then R, G, B."""
        P = self.per_gaussian
        bounds = np.flatnonzero(np.diff(self.pixel)) + 1
        starts = np.concatenate([[0], bounds]) if len(self.pixel) else []
        ends = np.concatenate([bounds, [len(self.pixel)]]) if len(self.pixel) else []
        for s, e in zip(starts, ends):
            p = int(self.pixel[s])
            rc = divmod(p, self.width)
            for ch in range(3):
                entries = {}
                for m in range(s, e):
                    base = int(self.gaussian[m]) * P
                    for i in np.flatnonzero(self.values[m, ch]):
                        entries[base + int(i)] = float(self.values[m, ch, i])
                if entries:
                    yield JacobianRow(rc, CHANNELS[ch], entries)

    def to_dense(self) -> np.ndarray:
        """Dense ``(3*W*H, l)`` matrix; only meant for small test scenes."""
        P = self.per_gaussian
        J = np.zeros((self.n_rows, self.n_params))
        for m in range(len(self.pixel)):
            g = int(self.gaussian[m])
            for ch in range(3):
                J[3 * int(self.pixel[m]) + ch, g * P:(g + 1) * P] += self.values[m, ch]
        return J

    def gram_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-Gaussian ``J_g^T J_g`` for every Gaussian with entries.

        Returns ``(gaussian_ids, blocks (k, P, P))``; cached on the instance.
        """
        if "blocks" not in self._grams:
            P = self.per_gaussian
            order = np.argsort(self.gaussian, kind="stable")
            gs = self.gaussian[order]
            ids, starts = np.unique(gs, return_index=True)
            ends = np.append(starts[1:], len(gs))
            blocks = np.empty((len(ids), P, P))
            for i, (s, e) in enumerate(zip(starts, ends)):
                V = self.values[order[s:e]].reshape(-1, P)
                blocks[i] = V.T @ V
            self._grams["blocks"] = (ids.astype(np.int64), blocks)
        return self._grams["blocks"]


def _empty_jacobian(scene: Scene, cam: CameraView, mask: ParamMask) -> ViewJacobian:
    P = mask.per_gaussian(scene.sh_degree)
    return ViewJacobian(cam.id, cam.width, cam.height, len(scene), scene.sh_degree, mask,
                        np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3, P)))


def view_jacobian(scene: Scene, cam: CameraView, mask: ParamMask = FULL_MASK) -> ViewJacobian:
    """Jacobian of every pixel-channel of ``render(scene, cam)``."""
    if len(scene) == 0:
        return _empty_jacobian(scene, cam, mask)
    proj = project_scene(scene, cam)
    ri = raster_inputs(proj, cam)
    if len(ri.order) == 0:
        return _empty_jacobian(scene, cam, mask)
    args = (ri.mean, ri.conic, ri.opac)
    n_pairs = _raster.count_pairs(*args, ri.extent, cam.width, cam.height,
                                  ri.tile_offsets, ri.tile_ids)
    pix, splat, dc_da, weight, da_dgeo, da_dop = _raster.jacobian_pairs(
        *args, ri.color, ri.extent, cam.width, cam.height, scene.background, n_pairs,
        ri.tile_offsets, ri.tile_ids)
    gid = ri.order[splat]
    deg = scene.sh_degree
    _, basis, unclamped, dcol_dpos = eval_colors(scene.sh, scene.positions, cam.center, deg,
                                                 with_grad=True)
    groups = mask.ordered()
    cols = []
    if {"position", "rotation", "scale"} & mask.groups:
        K = splat_geometry_jacobian(scene, cam, proj)
        geo = np.einsum("mf,mfk->mk", da_dgeo, K[gid])          # (M,10)
        geo_full = dc_da[:, :, None] * geo[:, None, :]          # (M,3,10)
        if deg > 0:
            geo_full[:, :, 0:3] += weight[:, None, None] * dcol_dpos[gid]
        if "position" in groups:
            cols.append(geo_full[:, :, 0:3])
        if "rotation" in groups:
            cols.append(geo_full[:, :, 3:7])
        if "scale" in groups:
            cols.append(geo_full[:, :, 7:10])
    if "opacity" in groups:
        op = proj.opacity[gid]
        cols.append((dc_da * (da_dop * op * (1.0 - op))[:, None])[:, :, None])
    if "sh" in groups:
        k = basis.shape[1]
        shj = np.zeros((len(gid), 3, k, 3))
        wb = weight[:, None] * basis[gid]                       # (M,K)
        for ch in range(3):
            shj[:, ch, :, ch] = wb * unclamped[gid, ch][:, None]
        cols.append(shj.reshape(len(gid), 3, 3 * k))
    values = np.concatenate(cols, axis=2)
    return ViewJacobian(cam.id, cam.width, cam.height, len(scene), deg, mask,
                        pix, gid.astype(np.int64), values)


def _raw_gradient(scene: Scene, cam: CameraView, proj: Projection, ri: RasterInputs,
                  g_mean, g_cov, g_op, g_col) -> np.ndarray:
    """Chain per-splat gradients into the full raw parameter layout ``(G, 14..)``."""
    n = len(scene)
    deg = scene.sh_degree
    out = np.zeros((n, scene.params_per_gaussian))
    order = ri.order
    gm = np.zeros((n, 5))
    gm[order, 0:2] = g_mean
    gm[order, 2:5] = g_cov
    K = splat_geometry_jacobian(scene, cam, proj)
    out[:, 0:10] = np.einsum("nf,nfk->nk", gm, K)
    gop = np.zeros(n)
    gop[order] = g_op
    op = proj.opacity
    out[:, 10] = gop * op * (1.0 - op)
    gc = np.zeros((n, 3))
    gc[order] = g_col
    _, basis, unclamped, dcol_dpos = eval_colors(scene.sh, scene.positions, cam.center, deg,
                                                 with_grad=True)
    gc_raw = gc * unclamped
    out[:, 11:] = (basis[:, :, None] * gc_raw[:, None, :]).reshape(n, -1)
    if deg > 0:
        out[:, 0:3] += np.einsum("nc,ncd->nd", gc, dcol_dpos)
    return out


def image_vjp(scene: Scene, cam: CameraView, cotangent) -> np.ndarray:
    """Gradient (full layout, ``(G, P)``) of ``sum(cotangent * render)``."""
    n = len(scene)
    out = np.zeros((n, scene.params_per_gaussian))
    if n == 0:
        return out
    proj = project_scene(scene, cam)
    ri = raster_inputs(proj, cam)
    if len(ri.order) == 0:
        return out
    cot = np.ascontiguousarray(cotangent, dtype=np.float64).reshape(cam.height, cam.width, 3)
    g = _raster.backward(ri.mean, ri.conic, ri.opac, ri.color, ri.extent, cam.width,
                         cam.height, scene.background, cot, ri.tile_offsets, ri.tile_ids)
    return _raw_gradient(scene, cam, proj, ri, *g)


def l1_loss(rendered: Image, target: Image) -> float:
    return float(np.mean(np.abs(rendered.pixels - target.pixels)))


def l1_gradient(scene: Scene, cam: CameraView, target: Image,
                mask: ParamMask = FULL_MASK, rendered: Image | None = None) -> np.ndarray:
    """Flat gradient of the mean absolute error against ``target``; ``sign(0) = 0``."""
    if (target.width, target.height) != (cam.width, cam.height):
        raise ValueError(f"target is {target.width}x{target.height}, "
                         f"camera {cam.id!r} is {cam.width}x{cam.height}")
    if rendered is None:
        rendered = render(scene, cam)
    cot = np.sign(rendered.pixels - target.pixels) / (3.0 * cam.width * cam.height)
    full = image_vjp(scene, cam, cot)
    return full[:, mask.local_columns(scene.sh_degree)].reshape(-1)

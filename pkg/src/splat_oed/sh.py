"""Real spherical-harmonics colour model (degrees 0-3) and its derivatives."""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis(dirs, degree: int, with_grad: bool = False):
    """Evaluate the basis at unit directions ``dirs`` of shape ``(N, 3)``.

    Returns ``B`` of shape ``(N, K)`` and, with ``with_grad``, ``dB`` of shape
    ``(N, K, 3)`` holding derivatives with respect to the (unit) direction
    components treated as free variables.
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    k = (degree + 1) ** 2
    B = np.zeros((n, k))
    dB = np.zeros((n, k, 3))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    B[:, 0] = C0
    if degree >= 1:
        B[:, 1] = -C1 * y
        B[:, 2] = C1 * z
        B[:, 3] = -C1 * x
        dB[:, 1, 1] = -C1
        dB[:, 2, 2] = C1
        dB[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = C2[0] * x * y
        B[:, 5] = C2[1] * y * z
        B[:, 6] = C2[2] * (2 * zz - xx - yy)
        B[:, 7] = C2[3] * x * z
        B[:, 8] = C2[4] * (xx - yy)
        dB[:, 4] = np.stack([C2[0] * y, C2[0] * x, 0 * x], 1)
        dB[:, 5] = np.stack([0 * x, C2[1] * z, C2[1] * y], 1)
        dB[:, 6] = np.stack([-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z], 1)
        dB[:, 7] = np.stack([C2[3] * z, 0 * x, C2[3] * x], 1)
        dB[:, 8] = np.stack([2 * C2[4] * x, -2 * C2[4] * y, 0 * x], 1)
    if degree >= 3:
        B[:, 9] = C3[0] * y * (3 * xx - yy)
        B[:, 10] = C3[1] * x * y * z
        B[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = C3[5] * z * (xx - yy)
        B[:, 15] = C3[6] * x * (xx - 3 * yy)
        zero = 0 * x
        dB[:, 9] = np.stack([6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero], 1)
        dB[:, 10] = np.stack([C3[1] * y * z, C3[1] * x * z, C3[1] * x * y], 1)
        dB[:, 11] = np.stack([-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy),
                              8 * C3[2] * y * z], 1)
        dB[:, 12] = np.stack([-6 * C3[3] * x * z, -6 * C3[3] * y * z,
                              C3[3] * (6 * zz - 3 * xx - 3 * yy)], 1)
        dB[:, 13] = np.stack([C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y,
                              8 * C3[4] * x * z], 1)
        dB[:, 14] = np.stack([2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)], 1)
        dB[:, 15] = np.stack([C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero], 1)
    if with_grad:
        return B, dB
    return B


def eval_colors(sh, positions, cam_center, degree: int, with_grad: bool = False):
    """Per-Gaussian RGB seen from ``cam_center``.

    Colour is ``clip(sum_j B_j c_j + 0.5, 0, 1)`` with the basis evaluated at
    the unit direction from the camera centre to the Gaussian centre.

    With ``with_grad`` also returns ``basis (N,K)``, ``unclamped (N,3)`` bool
    and ``dcolor_dpos (N,3,3)`` (channel x position component).
    """
    sh = np.asarray(sh, dtype=np.float64)
    n = len(sh)
    v = np.asarray(positions, dtype=np.float64) - np.asarray(cam_center, dtype=np.float64)
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    norm = np.where(norm > 0, norm, 1.0)
    dirs = v / norm
    if with_grad:
        B, dB = sh_basis(dirs, degree, with_grad=True)
    else:
        B = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", B, sh) + 0.5
    colors = np.clip(raw, 0.0, 1.0)
    if not with_grad:
        return colors
    unclamped = (raw > 0.0) & (raw < 1.0)
    dpos = np.zeros((n, 3, 3))
    if degree > 0:
        # d(raw_c)/d(dir) then through dir = v/|v|
        draw_ddir = np.einsum("nkd,nkc->ncd", dB, sh)
        proj = (np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]) / norm[:, :, None]
        dpos = np.einsum("ncd,nde->nce", draw_ddir, proj) * unclamped[:, :, None]
    return colors, B, unclamped, dpos

"""Forward rendering: EWA projection, kernel evaluation, alpha compositing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _raster
from .scene import CameraView, Image, Scene, quat_to_rotmat, sigmoid
from .sh import eval_colors

NEAR_PLANE = 0.01
LOWPASS = 0.3
ALPHA_MAX = _raster.ALPHA_MAX
ALPHA_MIN = _raster.ALPHA_MIN
T_MIN = _raster.T_MIN
CULL_SIGMA = 3.0


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    base_opacity: float
    color: np.ndarray
    index: int = 0


def covariances(rotations, log_scales) -> np.ndarray:
    R = quat_to_rotmat(rotations)
    s2 = np.exp(2.0 * np.asarray(log_scales))
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def projection_jacobian(t_cam, cam: CameraView) -> np.ndarray:
    """2x3 Jacobian of the pinhole map at camera-frame points ``t_cam (N,3)``."""
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    A = np.zeros((len(t_cam), 2, 3))
    A[:, 0, 0] = cam.fx / tz
    A[:, 0, 2] = -cam.fx * tx / tz**2
    A[:, 1, 1] = cam.fy / tz
    A[:, 1, 2] = -cam.fy * ty / tz**2
    return A


@dataclass(frozen=True)
class Projection:
    """All Gaussians of a scene projected into one view (unsorted, scene order)."""

    t_cam: np.ndarray      # (N,3) camera-frame centres
    mean2d: np.ndarray     # (N,2)
    cov2d: np.ndarray      # (N,2,2), low-pass floor included
    depth: np.ndarray      # (N,)
    opacity: np.ndarray    # (N,)
    color: np.ndarray      # (N,3)
    visible: np.ndarray    # (N,) bool, False when culled

    def sorted_indices(self) -> np.ndarray:
        """Visible Gaussians front-to-back; equal depths keep scene order."""
        vis = np.flatnonzero(self.visible)
        return vis[np.argsort(self.depth[vis], kind="stable")]


def project_scene(scene: Scene, cam: CameraView) -> Projection:
    n = len(scene)
    t_cam = cam.to_camera(scene.positions) if n else np.zeros((0, 3))
    depth = t_cam[:, 2].copy()
    in_front = depth > NEAR_PLANE
    safe = t_cam.copy()
    safe[~in_front, 2] = 1.0
    mean2d = np.stack([cam.fx * safe[:, 0] / safe[:, 2] + cam.cx,
                       cam.fy * safe[:, 1] / safe[:, 2] + cam.cy], axis=1) if n else np.zeros((0, 2))
    M = projection_jacobian(safe, cam) @ cam.rotation
    cov3 = covariances(scene.rotations, scene.log_scales) if n else np.zeros((0, 3, 3))
    cov2d = M @ cov3 @ np.transpose(M, (0, 2, 1)) + LOWPASS * np.eye(2)
    opacity = sigmoid(scene.opacity_logits)
    color = eval_colors(scene.sh, scene.positions, cam.center, scene.sh_degree) if n else np.zeros((0, 3))
    # 3-sigma square around the largest axis against the image rectangle
    tr = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    r = CULL_SIGMA * np.sqrt(lam_max)
    on_screen = ((mean2d[:, 0] + r >= 0) & (mean2d[:, 0] - r <= cam.width)
                 & (mean2d[:, 1] + r >= 0) & (mean2d[:, 1] - r <= cam.height))
    visible = in_front & on_screen
    return Projection(t_cam, mean2d, cov2d, depth, opacity, color, visible)


def project(g_or_scene, cam: CameraView, index: int = 0) -> Splat2D | None:
    """Splat of one Gaussian, or ``None`` when it is culled.

    Accepts a :class:`~splat_oed.scene.Gaussian` (treated as a one-Gaussian
    degree-matched scene) or a scene plus ``index``.
    """
    if isinstance(g_or_scene, Scene):
        scene = g_or_scene.subset([index])
    else:
        scene = Scene.from_gaussians([g_or_scene])
    p = project_scene(scene, cam)
    if not p.visible[0]:
        return None
    return Splat2D(p.mean2d[0], p.cov2d[0], float(p.depth[0]), float(p.opacity[0]),
                   p.color[0], index)


def kernel_alpha(s: Splat2D, pixel) -> float:
    """Clamped kernel contribution of ``s`` at image point ``pixel``; 0 below 1/255."""
    d = np.asarray(pixel, dtype=np.float64) - s.mean2d
    power = -0.5 * d @ np.linalg.solve(s.cov2d, d)
    a = min(s.base_opacity * math.exp(power), ALPHA_MAX)
    return a if a >= ALPHA_MIN else 0.0


def composite(splats: Sequence[Splat2D], pixel, background=(0.0, 0.0, 0.0),
              alphas: Sequence[float] | None = None) -> np.ndarray:
    """Front-to-back blend of depth-sorted splats at one pixel.

    ``alphas`` overrides the kernel evaluation (already-computed contributions).
    """
    out = np.zeros(3)
    T = 1.0
    for i, s in enumerate(splats):
        if T < T_MIN:
            break
        a = kernel_alpha(s, pixel) if alphas is None else min(float(alphas[i]), ALPHA_MAX)
        if a < ALPHA_MIN:
            continue
        out = out + np.asarray(s.color) * (a * T)
        T *= 1.0 - a
    return out + np.asarray(background, dtype=np.float64) * T


def _cut_extent(cov2d, opacity) -> np.ndarray:
    # beyond this box half-width the kernel is provably below the cutoff
    tr = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    ratio = np.maximum(opacity / ALPHA_MIN, 1.0)
    return np.sqrt(2.0 * np.log(ratio) * lam_max) * (1.0 + 1e-9) + 1e-9


@dataclass(frozen=True)
class RasterInputs:
    """Sorted splat arrays in the layout the kernels expect."""

    order: np.ndarray      # scene index of each sorted splat
    mean: np.ndarray
    conic: np.ndarray
    opac: np.ndarray
    color: np.ndarray
    extent: np.ndarray
    width: int
    height: int
    tile_offsets: np.ndarray
    tile_ids: np.ndarray


def raster_inputs(proj: Projection, cam: CameraView) -> RasterInputs:
    order = proj.sorted_indices()
    cov = proj.cov2d[order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    opac = np.ascontiguousarray(proj.opacity[order])
    mean = np.ascontiguousarray(proj.mean2d[order]).reshape(-1, 2)
    extent = _cut_extent(cov, opac)
    offs, ids = _raster.bin_tiles(mean, extent, cam.width, cam.height)
    return RasterInputs(order, mean, np.ascontiguousarray(conic).reshape(-1, 3), opac,
                        np.ascontiguousarray(proj.color[order]).reshape(-1, 3), extent,
                        cam.width, cam.height, offs, ids)


def render_with_transmittance(scene: Scene, cam: CameraView) -> tuple[np.ndarray, np.ndarray]:
    ri = raster_inputs(project_scene(scene, cam), cam)
    return _raster.forward(ri.mean, ri.conic, ri.opac, ri.color, ri.extent,
                           cam.width, cam.height, scene.background, ri.tile_offsets, ri.tile_ids)


def render(scene: Scene, cam: CameraView) -> Image:
    img, _ = render_with_transmittance(scene, cam)
    return Image.finalize(img)


def activity_map(scene: Scene, cam: CameraView) -> np.ndarray:
    """``(H, W, G)`` activity codes indexed by scene Gaussian (see ``_raster.activity``)."""
    ri = raster_inputs(project_scene(scene, cam), cam)
    act = _raster.activity(ri.mean, ri.conic, ri.opac, ri.extent, cam.width, cam.height,
                           ri.tile_offsets, ri.tile_ids)
    out = np.zeros((cam.height, cam.width, len(scene)), dtype=np.int8)
    out[:, :, ri.order] = act
    return out


# -- image files --------------------------------------------------------

def to_bytes(image: Image) -> np.ndarray:
    # round half up
    return np.floor(np.clip(image.pixels, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(image: Image, path) -> None:
    path = Path(path)
    data = to_bytes(image)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    try:
        path.write_bytes(header + data.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_ppm(path) -> Image:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return Image(data.reshape(h, w, 3) / 255.0)


def write_png(image: Image, path) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(to_bytes(image)).save(path)


def write_image(image: Image, path) -> None:
    if str(path).lower().endswith(".png"):
        write_png(image, path)
    else:
        write_ppm(image, path)

"""Fitting a scene to posed images with Adam on the L1 rendering loss."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .gradients import image_vjp
from .metrics import psnr
from .render import render
from .scene import CameraView, Image, Scene, group_size, n_sh_coeffs

GRAD_CLIP = 1e3


@dataclass(frozen=True)
class LRConfig:
    position: float = 2e-3
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def column_rates(self, sh_degree: int, extent: float = 1.0) -> np.ndarray:
        """Per-column learning rate over the full per-Gaussian layout."""
        rates = [self.position * extent] * 3 + [self.rotation] * 4 + [self.scale] * 3
        rates += [self.opacity] + [self.sh] * group_size("sh", sh_degree)
        return np.array(rates)


def camera_extent(cams) -> float:
    """Radius of the camera centres around their mean, padded by 10%."""
    centers = np.array([c.center for c in cams])
    if len(centers) < 2:
        return 1.0
    r = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) * 1.1
    return r if r > 0 else 1.0


def _frustum_points(cam: CameraView, near: float, far: float) -> np.ndarray:
    corners = np.array([[0, 0], [cam.width, 0], [0, cam.height], [cam.width, cam.height]], float)
    pts = []
    for d in (near, far):
        x = (corners[:, 0] - cam.cx) / cam.fx * d
        y = (corners[:, 1] - cam.cy) / cam.fy * d
        pts.append(np.stack([x, y, np.full(4, d)], axis=1))
    local = np.concatenate(pts)
    return (local - cam.translation) @ cam.rotation


def _inside(cam: CameraView, pts, near: float, far: float) -> np.ndarray:
    t = cam.to_camera(pts)
    z = t[:, 2]
    zs = np.where(z > 0, z, 1.0)
    u = cam.fx * t[:, 0] / zs + cam.cx
    v = cam.fy * t[:, 1] / zs + cam.cy
    return (z >= near) & (z <= far) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)


def init_box(views, near: float = 0.5, far: float = 5.0, grid: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of the region seen by every camera within ``[near, far]`` depth.

    Falls back to the box around the union of the truncated frusta when the
    cameras share no common region.
    """
    cams = list(views)
    allpts = np.concatenate([_frustum_points(c, near, far) for c in cams])
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    axes = [np.linspace(lo[i], hi[i], grid) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    keep = np.ones(len(pts), dtype=bool)
    for c in cams:
        keep &= _inside(c, pts, near, far)
    if keep.sum() >= 2:
        step = (hi - lo) / (grid - 1)
        lo2, hi2 = pts[keep].min(axis=0) - step, pts[keep].max(axis=0) + step
        return np.maximum(lo2, lo), np.minimum(hi2, hi)
    return lo, hi


def init_scene(views, seed: int, n_gaussians: int, sh_degree: int = 0,
               background=(0.0, 0.0, 0.0)) -> Scene:
    """Random mid-gray Gaussians spread uniformly over :func:`init_box`."""
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    cams = [v[0] if isinstance(v, tuple) else v for v in views]
    lo, hi = init_box(cams)
    rng = np.random.default_rng(seed)
    pos = rng.uniform(lo, hi, size=(n_gaussians, 3))
    diag = float(np.linalg.norm(hi - lo))
    log_scale = math.log(0.1 * diag / n_gaussians ** (1.0 / 3.0))
    rot = np.zeros((n_gaussians, 4))
    rot[:, 0] = 1.0
    return Scene(pos, rot, np.full((n_gaussians, 3), log_scale), np.zeros(n_gaussians),
                 np.zeros((n_gaussians, n_sh_coeffs(sh_degree), 3)), sh_degree, background)


def _params(scene: Scene) -> np.ndarray:
    n = len(scene)
    return np.concatenate([scene.positions, scene.rotations, scene.log_scales,
                           scene.opacity_logits.reshape(n, 1), scene.sh.reshape(n, -1)], axis=1)


def _scene_from(scene: Scene, p: np.ndarray) -> Scene:
    n = len(scene)
    return scene.replace(positions=p[:, 0:3], rotations=p[:, 3:7], log_scales=p[:, 7:10],
                         opacity_logits=p[:, 10], sh=p[:, 11:].reshape(n, -1, 3))


class Adam:
    """Adam with per-column learning rates over a ``(G, P)`` parameter matrix."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.t, "m": self.m.reshape(-1).tolist(), "v": self.v.reshape(-1).tolist()}

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["step"])
        self.m = np.asarray(d["m"], dtype=np.float64).reshape(self.m.shape)
        self.v = np.asarray(d["v"], dtype=np.float64).reshape(self.v.shape)


TrainSet = Mapping[str, "tuple[CameraView, Image]"]


class Trainer:
    """Stateful training loop; :meth:`run` can be called repeatedly as views are added."""

    def __init__(self, scene: Scene, lr: LRConfig = LRConfig(), seed: int = 0,
                 extent: float | None = None):
        self.scene = scene
        self.lr = lr
        self.extent = extent
        self.rng = np.random.default_rng(seed)
        self.opt: Adam | None = None

    def _ensure_opt(self, train_views: TrainSet) -> None:
        if self.opt is None:
            if self.extent is None:
                self.extent = camera_extent([c for c, _ in train_views.values()])
            rates = self.lr.column_rates(self.scene.sh_degree, self.extent)
            self.opt = Adam((len(self.scene), len(rates)), rates,
                            self.lr.beta1, self.lr.beta2, self.lr.eps)

    def run(self, train_views: TrainSet, steps: int) -> Scene:
        if steps < 0:
            raise ValueError("steps must be >= 0")
        if steps == 0 or len(self.scene) == 0:
            return self.scene
        if not train_views:
            raise ValueError("no training views")
        self._ensure_opt(train_views)
        ids = sorted(train_views)
        params = _params(self.scene)
        scene = self.scene
        for _ in range(steps):
            cam, target = train_views[ids[int(self.rng.integers(len(ids)))]]
            rendered = render(scene, cam)
            cot = np.sign(rendered.pixels - target.pixels) / (3.0 * cam.width * cam.height)
            grad = image_vjp(scene, cam, cot)
            norm = float(np.sqrt(np.sum(grad * grad)))
            if not np.isfinite(norm):
                continue
            if norm > GRAD_CLIP:
                grad = grad * (GRAD_CLIP / norm)
            params = self.opt.step(params, grad)
            # renormalize the quaternions and keep the stored values unit
            params[:, 3:7] /= np.linalg.norm(params[:, 3:7], axis=1, keepdims=True)
            scene = _scene_from(scene, params)
        self.scene = scene
        return scene

    def save_checkpoint(self, scene_path, state_path) -> None:
        self.scene.save(scene_path)
        state = {"extent": self.extent, "lr": asdict(self.lr),
                 "optimizer": self.opt.state_dict() if self.opt else None,
                 "rng": self.rng.bit_generator.state}
        Path(state_path).write_text(json.dumps(state))

    @classmethod
    def load_checkpoint(cls, scene_path, state_path) -> "Trainer":
        state = json.loads(Path(state_path).read_text())
        t = cls(Scene.load(scene_path), LRConfig(**state["lr"]), 0, state["extent"])
        t.rng.bit_generator.state = state["rng"]
        if state["optimizer"] is not None:
            rates = t.lr.column_rates(t.scene.sh_degree, t.extent)
            t.opt = Adam((len(t.scene), len(rates)), rates, t.lr.beta1, t.lr.beta2, t.lr.eps)
            t.opt.load_state_dict(state["optimizer"])
        return t


def train(scene: Scene, train_views: TrainSet, steps: int, lr_config: LRConfig = LRConfig(),
          seed: int = 0) -> Scene:
    return Trainer(scene, lr_config, seed).run(train_views, steps)


def dataset_loss(scene: Scene, views: TrainSet) -> float:
    return float(np.mean([np.mean(np.abs(render(scene, c).pixels - img.pixels))
                          for c, img in views.values()]))


def dataset_psnr(scene: Scene, views: TrainSet) -> float:
    return float(np.mean([psnr(render(scene, c), img) for c, img in views.values()]))

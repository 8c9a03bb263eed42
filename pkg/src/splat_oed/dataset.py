"""Synthetic scenes, camera rigs and on-disk datasets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .render import read_ppm, render, to_bytes, write_ppm
from .scene import CameraView, Image, Scene, look_at, n_sh_coeffs
from .sh import C0

RIG_KINDS = ("orbit", "hemisphere", "cluster")
SCENE_KINDS = ("boxes", "blobs")
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _directions(kind: str, n: int, rng: np.random.Generator, elevation_deg: float,
                cap_fraction: float, cap_deg: float) -> np.ndarray:
    if kind == "orbit":
        az = 2 * math.pi * np.arange(n) / n
        el = math.radians(elevation_deg)
        return np.stack([np.cos(az) * math.cos(el), np.sin(az) * math.cos(el),
                         np.full(n, math.sin(el))], axis=1)
    if kind == "hemisphere":
        offset = rng.uniform(0, 2 * math.pi)
        i = np.arange(n)
        z = (i + 0.5) / n
        phi = offset + i * GOLDEN_ANGLE
        # lift the lowest ring off the horizon so every view sees the object
        z = 0.1 + 0.85 * z
        r = np.sqrt(1 - z * z)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if kind == "cluster":
        n_cap = int(round(cap_fraction * n))
        rest = _directions("hemisphere", n - n_cap, rng, elevation_deg, cap_fraction, cap_deg) \
            if n - n_cap else np.zeros((0, 3))
        az0 = rng.uniform(0, 2 * math.pi)
        el0 = math.radians(35.0)
        axis = np.array([math.cos(az0) * math.cos(el0), math.sin(az0) * math.cos(el0), math.sin(el0)])
        u = np.cross(axis, [0.0, 0.0, 1.0])
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        cos_max = math.cos(math.radians(cap_deg))
        ct = rng.uniform(cos_max, 1.0, n_cap)
        st = np.sqrt(1 - ct * ct)
        ph = rng.uniform(0, 2 * math.pi, n_cap)
        cap = ct[:, None] * axis + st[:, None] * (np.cos(ph)[:, None] * u + np.sin(ph)[:, None] * v)
        # interleave so the cap views are not all at the front of the id list
        dirs = np.concatenate([cap, rest])
        return dirs[rng.permutation(len(dirs))]
    raise ValueError(f"unknown rig kind {kind!r}; valid: {list(RIG_KINDS)}")


def make_rig(kind: str, n_views: int, radius: float = 4.0, target=(0.0, 0.0, 0.0), seed: int = 0,
             width: int = 64, height: int = 64, fov_deg: float = 50.0, prefix: str = "v",
             elevation_deg: float = 20.0, cap_fraction: float = 0.75, cap_deg: float = 20.0
             ) -> list[CameraView]:
    """Cameras on a sphere of ``radius`` around ``target``, all looking at it.

    ``orbit`` is an equal-angle ring at ``elevation_deg``; ``hemisphere`` a
    Fibonacci lattice over the upper hemisphere; ``cluster`` puts
    ``cap_fraction`` of the views in a cap of half-angle ``cap_deg`` and the
    rest on a hemisphere lattice.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    dirs = _directions(kind, n_views, rng, elevation_deg, cap_fraction, cap_deg)
    width_digits = max(3, len(str(n_views - 1)))
    return [look_at(f"{prefix}{i:0{width_digits}d}", target + radius * d, target, width, height, fov_deg)
            for i, d in enumerate(dirs)]


def _rgb_to_sh(rgb) -> np.ndarray:
    return (np.asarray(rgb) - 0.5) / C0


def _random_quats(rng, n) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_reference_scene(kind: str, n_gaussians: int, seed: int = 0, sh_degree: int = 0,
                         background=(0.0, 0.0, 0.0)) -> Scene:
    """Seeded ground-truth scene inside the unit ball.

    ``blobs``: coloured ellipsoids scattered in the ball (a single Gaussian
    sits at the origin). ``boxes``: flat Gaussians tiling the faces of three
    axis-aligned boxes, one colour per face so each side looks different.
    """
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    rng = np.random.default_rng(seed)
    k = n_sh_coeffs(sh_degree)
    if kind == "blobs":
        if n_gaussians == 1:
            pos = np.zeros((1, 3))
        else:
            d = rng.normal(size=(n_gaussians, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pos = d * rng.uniform(0, 1, (n_gaussians, 1)) ** (1 / 3)
        base = 0.35 / max(n_gaussians, 1) ** (1 / 3)
        log_scale = np.log(base * rng.uniform(0.6, 1.6, (n_gaussians, 3)))
        rot = _random_quats(rng, n_gaussians)
        colors = rng.uniform(0.05, 0.95, (n_gaussians, 3))
        op = rng.uniform(1.5, 4.0, n_gaussians)
    elif kind == "boxes":
        centers = rng.uniform(-0.45, 0.45, (3, 3))
        halves = rng.uniform(0.18, 0.35, (3, 3))
        face_colors = rng.uniform(0.05, 0.95, (3, 6, 3))
        box = rng.integers(0, 3, n_gaussians)
        face = rng.integers(0, 6, n_gaussians)
        axis, side = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        uv = rng.uniform(-1, 1, (n_gaussians, 3))
        uv[np.arange(n_gaussians), axis] = side
        pos = centers[box] + uv * halves[box]
        area = 8 * (halves[:, 0] * halves[:, 1] + halves[:, 1] * halves[:, 2] + halves[:, 0] * halves[:, 2])
        s = np.sqrt(area.mean() * 3 / n_gaussians) * 0.6
        log_scale = np.log(np.full((n_gaussians, 3), s) * rng.uniform(0.8, 1.2, (n_gaussians, 3)))
        log_scale[np.arange(n_gaussians), axis] = math.log(0.15 * s)
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n_gaussians, 1))
        colors = face_colors[box, face]
        op = rng.uniform(2.0, 4.0, n_gaussians)
    else:
        raise ValueError(f"unknown scene kind {kind!r}; valid: {list(SCENE_KINDS)}")
    sh = np.zeros((n_gaussians, k, 3))
    sh[:, 0, :] = _rgb_to_sh(colors)
    if sh_degree > 0:
        sh[:, 1:, :] = rng.normal(scale=0.15, size=(n_gaussians, k - 1, 3))
    return Scene(pos, rot, log_scale, op, sh, sh_degree, background)


def quantize(image: Image) -> Image:
    """8-bit round trip, matching what the PPM files hold."""
    return Image(to_bytes(image) / 255.0)


@dataclass
class Dataset:
    """Posed images with a train/test split and the ground-truth scene."""

    cameras: dict
    images: dict
    split: dict
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scene: Scene | None = None

    def ids(self, split: str | None = None) -> list[str]:
        return sorted(v for v in self.cameras if split is None or self.split[v] == split)

    def views(self, ids) -> dict:
        return {v: (self.cameras[v], self.images[v]) for v in ids}

    @property
    def train_ids(self) -> list[str]:
        return self.ids("train")

    @property
    def test_ids(self) -> list[str]:
        return self.ids("test")

    @classmethod
    def from_scene(cls, scene: Scene, train_cams, test_cams=()) -> "Dataset":
        cams, imgs, split = {}, {}, {}
        for tag, group in (("train", train_cams), ("test", test_cams)):
            for c in group:
                if c.id in cams:
                    raise ValueError(f"duplicate view id {c.id!r}")
                cams[c.id] = c
                imgs[c.id] = quantize(render(scene, c))
                split[c.id] = tag
        return cls(cams, imgs, split, np.array(scene.background), scene)


def render_dataset(scene: Scene, rig, out_dir, test_rig=()) -> Dataset:
    """Render ``rig`` (train) and ``test_rig`` views and write the dataset directory.

    Layout: ``manifest.json``, ``cameras.json``, ``scene.json``, ``images/<id>.ppm``.
    """
    out = Path(out_dir)
    ds = Dataset.from_scene(scene, rig, test_rig)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    manifest = {}
    for vid in ds.ids():
        rel = f"images/{vid}.ppm"
        write_ppm(ds.images[vid], out / rel)
        manifest[vid] = {"camera": ds.cameras[vid].to_dict(), "image": rel, "split": ds.split[vid]}
    (out / "manifest.json").write_text(json.dumps(
        {"background": list(map(float, scene.background)), "views": manifest}, indent=1))
    (out / "cameras.json").write_text(json.dumps([ds.cameras[v].to_dict() for v in ds.ids()], indent=1))
    scene.save(out / "scene.json")
    return ds


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest in {root}: {exc}") from exc
    cams, imgs, split = {}, {}, {}
    for vid, entry in manifest["views"].items():
        cams[vid] = CameraView.from_dict(entry["camera"])
        imgs[vid] = read_ppm(root / entry["image"])
        split[vid] = entry.get("split", "train")
    scene = Scene.load(root / "scene.json") if (root / "scene.json").exists() else None
    return Dataset(cams, imgs, split, np.asarray(manifest.get("background", (0, 0, 0)), float), scene)

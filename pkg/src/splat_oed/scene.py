"""Scene, Gaussian, camera and image types plus the flat parameter layout.

A :class:`Scene` keeps its Gaussians as stacked arrays so the renderer and
the Jacobian code can work on all of them at once; :attr:`Scene.gaussians`
gives the per-Gaussian view when one is needed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GROUPS = ("position", "rotation", "scale", "opacity", "sh")
GROUP_ALIASES = {
    "mu": "position",
    "position": "position",
    "r": "rotation",
    "rotation": "rotation",
    "s": "scale",
    "scale": "scale",
    "alpha": "opacity",
    "opacity": "opacity",
    "sh": "sh",
}
MAX_SH_DEGREE = 3


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def group_size(group: str, sh_degree: int) -> int:
    return {"position": 3, "rotation": 4, "scale": 3, "opacity": 1,
            "sh": 3 * n_sh_coeffs(sh_degree)}[group]


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of quaternion ``(w, x, y, z)``; ``q`` is normalized first.

    Works on a single quaternion or a stack of shape ``(..., 4)``.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _frozen(a, shape=None) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ParamMask:
    """Subset of the five per-Gaussian parameter groups."""

    groups: frozenset = frozenset(GROUPS)

    def __post_init__(self):
        groups = frozenset(self.groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}; valid: {list(GROUPS)}")
        object.__setattr__(self, "groups", groups)

    @classmethod
    def full(cls) -> "ParamMask":
        return cls(frozenset(GROUPS))

    @classmethod
    def without(cls, removed: Iterable[str]) -> "ParamMask":
        removed = {GROUP_ALIASES.get(g.lower(), g.lower()) for g in removed}
        mask = cls(frozenset(GROUPS) - removed)
        if not mask.groups:
            raise ValueError("parameter mask removes every group; nothing left to measure")
        return mask

    def ordered(self) -> list[str]:
        return [g for g in GROUPS if g in self.groups]

    def per_gaussian(self, sh_degree: int) -> int:
        return sum(group_size(g, sh_degree) for g in self.ordered())

    def local_columns(self, sh_degree: int) -> np.ndarray:
        """Indices of the masked columns inside one full per-Gaussian block."""
        cols, start = [], 0
        for g in GROUPS:
            n = group_size(g, sh_degree)
            if g in self.groups:
                cols.extend(range(start, start + n))
            start += n
        return np.array(cols, dtype=np.int64)

    def __str__(self) -> str:
        return "+".join(self.ordered())


FULL_MASK = ParamMask.full()


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("rotation quaternion must be non-zero and finite")
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        object.__setattr__(self, "rotation", _frozen(q / norm))
        object.__setattr__(self, "log_scale", _frozen(self.log_scale, (3,)))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        object.__setattr__(self, "sh_coeffs", _frozen(np.atleast_2d(self.sh_coeffs)))
        if self.sh_coeffs.shape[1] != 3:
            raise ValueError("sh_coeffs must be a sequence of RGB triples")

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def sh_degree(self) -> int:
        d = int(round(math.sqrt(len(self.sh_coeffs)))) - 1
        if n_sh_coeffs(d) != len(self.sh_coeffs):
            raise ValueError(f"{len(self.sh_coeffs)} SH coefficients is not a square count")
        return d


def shape_matrix(g: Gaussian) -> np.ndarray:
    """Covariance ``R S S^T R^T`` of one Gaussian."""
    R = quat_to_rotmat(g.rotation)
    s2 = np.exp(2.0 * g.log_scale)
    return (R * s2) @ R.T


@dataclass(frozen=True, eq=False)
class Scene:
    """Ordered Gaussians sharing one SH degree, plus a background colour.

    Parameters are held as read-only arrays:
    ``positions (G,3)``, ``rotations (G,4)``, ``log_scales (G,3)``,
    ``opacity_logits (G,)``, ``sh (G,K,3)`` with ``K = (sh_degree+1)**2``.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not 0 <= int(self.sh_degree) <= MAX_SH_DEGREE:
            raise ValueError(f"sh_degree must be in [0, {MAX_SH_DEGREE}]")
        object.__setattr__(self, "sh_degree", int(self.sh_degree))
        k = n_sh_coeffs(self.sh_degree)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        rot = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        norms = np.linalg.norm(rot, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError("rotation quaternions must be non-zero and finite")
        sh = np.array(self.sh, dtype=np.float64)
        if sh.size != n * k * 3:
            raise ValueError(f"expected {k} SH coefficients per Gaussian for degree {self.sh_degree}")
        bg = np.array(self.background, dtype=np.float64).reshape(3)
        if np.any(bg < 0) or np.any(bg > 1):
            raise ValueError("background must lie in [0, 1]")
        object.__setattr__(self, "positions", _frozen(pos))
        # leave unit-norm rows alone so save/load and flatten round trips are exact
        norms = np.where(np.abs(norms - 1.0) <= 4 * np.finfo(float).eps, 1.0, norms)
        object.__setattr__(self, "rotations", _frozen(rot / norms))
        object.__setattr__(self, "log_scales", _frozen(self.log_scales, (n, 3)))
        object.__setattr__(self, "opacity_logits", _frozen(self.opacity_logits, (n,)))
        object.__setattr__(self, "sh", _frozen(sh, (n, k, 3)))
        object.__setattr__(self, "background", _frozen(bg))

    @classmethod
    def empty(cls, sh_degree: int = 0, background=(0.0, 0.0, 0.0)) -> "Scene":
        k = n_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, k, 3)), sh_degree, background)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], sh_degree: int | None = None,
                       background=(0.0, 0.0, 0.0)) -> "Scene":
        gaussians = list(gaussians)
        if sh_degree is None:
            sh_degree = gaussians[0].sh_degree if gaussians else 0
        if any(g.sh_degree != sh_degree for g in gaussians):
            raise ValueError("all Gaussians must share the scene's SH degree")
        if not gaussians:
            return cls.empty(sh_degree, background)
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.sh_coeffs for g in gaussians]),
            sh_degree,
            background,
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def gaussians(self) -> list[Gaussian]:
        return [Gaussian(self.positions[i], self.rotations[i], self.log_scales[i],
                         self.opacity_logits[i], self.sh[i]) for i in range(len(self))]

    @property
    def params_per_gaussian(self) -> int:
        return FULL_MASK.per_gaussian(self.sh_degree)

    def n_params(self, mask: ParamMask = FULL_MASK) -> int:
        return len(self) * mask.per_gaussian(self.sh_degree)

    def replace(self, **changes) -> "Scene":
        fields = dict(positions=self.positions, rotations=self.rotations,
                      log_scales=self.log_scales, opacity_logits=self.opacity_logits,
                      sh=self.sh, sh_degree=self.sh_degree, background=self.background)
        fields.update(changes)
        return Scene(**fields)

    def subset(self, indices) -> "Scene":
        idx = np.asarray(indices, dtype=np.int64)
        return self.replace(positions=self.positions[idx], rotations=self.rotations[idx],
                            log_scales=self.log_scales[idx],
                            opacity_logits=self.opacity_logits[idx], sh=self.sh[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.sh_degree == other.sh_degree
                and all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays())))

    def _arrays(self):
        return (self.positions, self.rotations, self.log_scales, self.opacity_logits,
                self.sh, self.background)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "sh_degree": self.sh_degree,
            "background": self.background.tolist(),
            "gaussians": [
                {
                    "position": self.positions[i].tolist(),
                    "rotation": self.rotations[i].tolist(),
                    "log_scale": self.log_scales[i].tolist(),
                    "opacity_logit": float(self.opacity_logits[i]),
                    "sh_coeffs": self.sh[i].tolist(),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        degree = int(d.get("sh_degree", 0))
        gs = d.get("gaussians", [])
        if not gs:
            return cls.empty(degree, d.get("background", (0, 0, 0)))
        return cls(
            [g["position"] for g in gs],
            [g["rotation"] for g in gs],
            [g["log_scale"] for g in gs],
            [g["opacity_logit"] for g in gs],
            [g["sh_coeffs"] for g in gs],
            degree,
            d.get("background", (0, 0, 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class IndexMap:
    """Where each flat parameter lives: ``(gaussian, group, component)``."""

    mask: ParamMask
    n_gaussians: int
    sh_degree: int

    @property
    def per_gaussian(self) -> int:
        return self.mask.per_gaussian(self.sh_degree)

    def __len__(self) -> int:
        return self.n_gaussians * self.per_gaussian

    def locate(self, flat_index: int) -> tuple[int, str, int]:
        if not 0 <= flat_index < len(self):
            raise IndexError(flat_index)
        g, local = divmod(flat_index, self.per_gaussian)
        for group in self.mask.ordered():
            n = group_size(group, self.sh_degree)
            if local < n:
                return g, group, local
            local -= n
        raise AssertionError("unreachable")

    def index(self, gaussian: int, group: str, component: int) -> int:
        if group not in self.mask.groups:
            raise KeyError(f"group {group!r} is masked out")
        offset = 0
        for g in self.mask.ordered():
            if g == group:
                break
            offset += group_size(g, self.sh_degree)
        return gaussian * self.per_gaussian + offset + component

    def group_slice(self, group: str) -> slice:
        """Slice of ``group`` inside one masked per-Gaussian block."""
        offset = 0
        for g in self.mask.ordered():
            n = group_size(g, self.sh_degree)
            if g == group:
                return slice(offset, offset + n)
            offset += n
        raise KeyError(group)


def _full_blocks(scene: Scene) -> np.ndarray:
    n = len(scene)
    return np.concatenate([
        scene.positions, scene.rotations, scene.log_scales,
        scene.opacity_logits.reshape(n, 1), scene.sh.reshape(n, -1),
    ], axis=1)


def flatten_params(scene: Scene, mask: ParamMask = FULL_MASK) -> tuple[np.ndarray, IndexMap]:
    """Flat parameter vector (Gaussian-major, groups in canonical order)."""
    cols = mask.local_columns(scene.sh_degree)
    flat = _full_blocks(scene)[:, cols].reshape(-1)
    return flat, IndexMap(mask, len(scene), scene.sh_degree)


def unflatten_params(scene: Scene, flat, index_map: IndexMap) -> Scene:
    """Inverse of :func:`flatten_params`; masked-out groups are taken from ``scene``."""
    flat = np.asarray(flat, dtype=np.float64)
    if len(flat) != len(index_map) or index_map.n_gaussians != len(scene):
        raise ValueError("flat vector does not match the index map / scene")
    full = _full_blocks(scene).copy()
    cols = index_map.mask.local_columns(scene.sh_degree)
    full[:, cols] = flat.reshape(len(scene), -1)
    n = len(scene)
    return scene.replace(
        positions=full[:, 0:3], rotations=full[:, 3:7], log_scales=full[:, 7:10],
        opacity_logits=full[:, 10], sh=full[:, 11:].reshape(n, -1, 3),
    )


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera; ``rotation``/``translation`` map world to camera frame.

    Camera frame convention: +z forward, +x right, +y down. Pixel ``(row, col)``
    has its centre at image coordinates ``(col + 0.5, row + 0.5)``.
    """

    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image dimensions must be >= 1")
        R = _frozen(self.rotation, (3, 3))
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "id", str(self.id))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def with_id(self, new_id: str) -> "CameraView":
        return CameraView(new_id, self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          self.rotation, self.translation)

    def to_dict(self) -> dict:
        return {"id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(d["id"], d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraView):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.id)


def look_at(view_id: str, eye, target, width: int, height: int, fov_deg: float = 50.0,
            up=(0.0, 0.0, 1.0)) -> CameraView:
    """Camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    # re-orthonormalize so the 1e-9 invariant holds after the cross products
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = -R @ eye
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return CameraView(view_id, f, f, width / 2, height / 2, width, height, R, t)


def save_cameras(cameras: Sequence[CameraView], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[CameraView]:
    """Read a camera list, or a single camera object, from JSON."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read cameras from {path}: {exc}") from exc
    if isinstance(data, dict):
        data = [data]
    return [CameraView.from_dict(d) for d in data]


@dataclass(frozen=True, eq=False)
class Image:
    """RGB image, ``pixels`` of shape ``(height, width, 3)`` in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must have shape (height, width, 3)")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def finalize(cls, pixels) -> "Image":
        return cls(np.clip(pixels, 0.0, 1.0))

    @classmethod
    def constant(cls, width: int, height: int, color) -> "Image":
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

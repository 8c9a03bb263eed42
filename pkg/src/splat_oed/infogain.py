"""Hessian approximations, P-optimality uncertainty and view selection.

The information matrix ``H = J^T J`` is kept either as its main diagonal
(``"simple"``) or as one dense block per Gaussian (``"block"``). Every
functional is evaluated on the regularized ``H + lambda_prior * I``.

Functionals reduce a vector of per-parameter (simple) or per-block (block)
terms with ``math.fsum``/``min``/``max``, which are order independent. Scoring
a candidate only recomputes the terms of the Gaussians it touches, and the
result is bit-identical to evaluating the accumulated Hessian from scratch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Union

import numpy as np

from . import smallmath
from .gradients import ViewJacobian, view_jacobian
from .scene import FULL_MASK, CameraView, ParamMask, Scene

LAMBDA_PRIOR = 1e-6
KINDS = ("simple", "block")
FUNCTIONALS = ("t", "a", "d", "e", "fisherrf")


@dataclass(frozen=True)
class UncertaintyFunctional:
    kind: str
    e_variant: str | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in FUNCTIONALS:
            raise ValueError(f"unknown functional {self.kind!r}; valid: {list(FUNCTIONALS)}")
        variant = self.e_variant
        if kind == "e":
            variant = variant or "max"
            if variant not in ("min", "max"):
                raise ValueError("E-optimality variant must be 'min' or 'max'")
        elif variant is not None:
            raise ValueError("e_variant only applies to E-optimality")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "e_variant", variant)

    @classmethod
    def parse(cls, name: str) -> "UncertaintyFunctional":
        name = name.lower()
        if name in ("e-min", "e_min", "emin"):
            return cls("e", "min")
        if name in ("e-max", "e_max", "emax"):
            return cls("e", "max")
        return cls(name)

    @property
    def maximize(self) -> bool:
        return self.kind == "fisherrf"

    def __str__(self) -> str:
        return f"e-{self.e_variant}" if self.kind == "e" else self.kind


T_OPT = UncertaintyFunctional("t")
A_OPT = UncertaintyFunctional("a")
D_OPT = UncertaintyFunctional("d")
E_OPT = UncertaintyFunctional("e", "max")
FISHER_RF = UncertaintyFunctional("fisherrf")


@dataclass(frozen=True, eq=False)
class ViewInfo:
    """Compact ``J^T J`` contribution of one view, restricted to its Gaussians."""

    view_id: str
    mask: ParamMask
    n_gaussians: int
    sh_degree: int
    ids: np.ndarray        # touched Gaussians, ascending
    grams: np.ndarray      # (k, P, P)

    @classmethod
    def from_jacobian(cls, vj: ViewJacobian) -> "ViewInfo":
        ids, grams = vj.gram_blocks()
        return cls(vj.view_id, vj.mask, vj.n_gaussians, vj.sh_degree, ids, grams)

    def diagonals(self) -> np.ndarray:
        return np.diagonal(self.grams, axis1=1, axis2=2)

    def scaled(self, s: float) -> "ViewInfo":
        return ViewInfo(self.view_id, self.mask, self.n_gaussians, self.sh_degree,
                        self.ids, self.grams * (s * s))

    def with_id(self, view_id: str) -> "ViewInfo":
        return ViewInfo(view_id, self.mask, self.n_gaussians, self.sh_degree, self.ids, self.grams)


ViewLike = Union[ViewJacobian, ViewInfo]


def as_info(v: ViewLike) -> ViewInfo:
    return v if isinstance(v, ViewInfo) else ViewInfo.from_jacobian(v)


def _sum_diag(blocks: np.ndarray) -> np.ndarray:
    acc = np.zeros(len(blocks))
    for k in range(blocks.shape[1]):
        acc += blocks[:, k, k]
    return acc


@dataclass(frozen=True, eq=False)
class HessianApprox:
    """Diagonal or per-Gaussian block-diagonal information matrix (unregularized)."""

    kind: str
    mask: ParamMask
    n_gaussians: int
    sh_degree: int
    lambda_prior: float = LAMBDA_PRIOR
    diag: np.ndarray | None = None      # (G, P) for simple
    blocks: np.ndarray | None = None    # (G, P, P) for block
    _terms: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown approximation {self.kind!r}; valid: {list(KINDS)}")
        if not self.lambda_prior > 0:
            raise ValueError("lambda_prior must be positive")
        P = self.per_gaussian
        if self.kind == "simple":
            d = np.zeros((self.n_gaussians, P)) if self.diag is None else np.array(self.diag, dtype=np.float64)
            d = d.reshape(self.n_gaussians, P)
            d.setflags(write=False)
            object.__setattr__(self, "diag", d)
            object.__setattr__(self, "blocks", None)
        else:
            b = (np.zeros((self.n_gaussians, P, P)) if self.blocks is None
                 else np.array(self.blocks, dtype=np.float64).reshape(self.n_gaussians, P, P))
            b.setflags(write=False)
            object.__setattr__(self, "blocks", b)
            object.__setattr__(self, "diag", None)

    @classmethod
    def prior(cls, kind: str, scene_or_n, mask: ParamMask = FULL_MASK, sh_degree: int = 0,
              lambda_prior: float = LAMBDA_PRIOR) -> "HessianApprox":
        """Zero information: only the ``lambda_prior`` regularizer remains."""
        if isinstance(scene_or_n, Scene):
            return cls(kind, mask, len(scene_or_n), scene_or_n.sh_degree, lambda_prior)
        return cls(kind, mask, int(scene_or_n), sh_degree, lambda_prior)

    @property
    def per_gaussian(self) -> int:
        return self.mask.per_gaussian(self.sh_degree)

    @property
    def n_params(self) -> int:
        return self.n_gaussians * self.per_gaussian

    def diagonal(self) -> np.ndarray:
        """Flat diagonal of ``H`` (unregularized) in parameter order."""
        if self.kind == "simple":
            return self.diag.reshape(-1).copy()
        return np.diagonal(self.blocks, axis1=1, axis2=2).reshape(-1).copy()

    def dense(self) -> np.ndarray:
        P, G = self.per_gaussian, self.n_gaussians
        H = np.zeros((G * P, G * P))
        for g in range(G):
            sl = slice(g * P, (g + 1) * P)
            H[sl, sl] = np.diag(self.diag[g]) if self.kind == "simple" else self.blocks[g]
        return H

    def regularized_dense(self) -> np.ndarray:
        return self.dense() + self.lambda_prior * np.eye(self.n_params)

    def _check(self, info: ViewInfo) -> None:
        if info.mask != self.mask:
            raise ValueError(f"mask mismatch: view {info.view_id!r} uses {info.mask}, "
                             f"Hessian uses {self.mask}")
        if info.n_gaussians != self.n_gaussians or info.sh_degree != self.sh_degree:
            raise ValueError(f"view {info.view_id!r} was computed for a different scene layout")

    def _updated_units(self, info: ViewInfo, sign: float = 1.0) -> np.ndarray:
        # new data of the touched Gaussians
        if self.kind == "simple":
            return self.diag[info.ids] + sign * info.diagonals()
        return self.blocks[info.ids] + sign * info.grams

    def _with_units(self, ids, units) -> "HessianApprox":
        if self.kind == "simple":
            d = self.diag.copy()
            d[ids] = units
            return HessianApprox("simple", self.mask, self.n_gaussians, self.sh_degree,
                                 self.lambda_prior, diag=d)
        b = self.blocks.copy()
        b[ids] = units
        return HessianApprox("block", self.mask, self.n_gaussians, self.sh_degree,
                             self.lambda_prior, blocks=b)

    def terms(self, f: UncertaintyFunctional) -> np.ndarray:
        """Per-unit terms of functional ``f`` for this Hessian (cached)."""
        key = str(f)
        if key not in self._terms:
            data = self.diag if self.kind == "simple" else self.blocks
            self._terms[key] = unit_terms(self.kind, f, data, self.lambda_prior)
        return self._terms[key]


def unit_terms(kind: str, f: UncertaintyFunctional, data: np.ndarray, lam: float) -> np.ndarray:
    """Terms whose reduction gives the functional.

    ``data`` is ``(k, P)`` diagonals (simple) or ``(k, P, P)`` blocks (block),
    unregularized. Shapes of the result: ``(k, P)`` simple, ``(k,)`` block.
    """
    if kind == "simple":
        h = data + lam
        if f.kind == "t":
            return 1.0 / h
        if f.kind == "a":
            return h
        if f.kind == "d":
            return np.log(h)
        if f.kind == "e":
            return h
        raise ValueError("FisherRF is a candidate score, not a state functional")
    if len(data) == 0:
        return np.zeros(0)
    reg = data + lam * np.eye(data.shape[1])
    if f.kind == "t":
        return smallmath.trace_inverse_spd(reg)
    if f.kind == "a":
        return _sum_diag(reg)
    if f.kind == "d":
        return smallmath.logdet_spd(reg)
    if f.kind == "e":
        w = smallmath.eigvals_sym(reg)
        if np.any(w[:, 0] <= 0):
            raise smallmath.NotSPDError("block with non-positive eigenvalue")
        return w[:, 0] if f.e_variant == "max" else w[:, -1]
    raise ValueError("FisherRF is a candidate score, not a state functional")


def reduce_terms(f: UncertaintyFunctional, terms: np.ndarray, n_params: int) -> float:
    flat = np.asarray(terms).reshape(-1)
    if f.kind == "t":
        return math.fsum(flat) / n_params
    if f.kind == "a":
        return 1.0 / (math.fsum(flat) / n_params)
    if f.kind == "d":
        return math.exp(-math.fsum(flat) / n_params)
    if f.kind == "e":
        # terms are eigenvalues of the regularized H; variance is their inverse
        return 1.0 / float(flat.min()) if f.e_variant == "max" else 1.0 / float(flat.max())
    raise ValueError("FisherRF is a candidate score, not a state functional")


def accumulate_hessian(h: HessianApprox, vj: ViewLike) -> HessianApprox:
    """``H + J^T J`` restricted to the approximation's structure; ``h`` is untouched."""
    info = as_info(vj)
    h._check(info)
    if len(info.ids) == 0:
        return h
    return h._with_units(info.ids, h._updated_units(info))


def remove_view(h: HessianApprox, vj: ViewLike) -> HessianApprox:
    """``H - J^T J``; the inverse of :func:`accumulate_hessian` up to rounding."""
    info = as_info(vj)
    h._check(info)
    if len(info.ids) == 0:
        return h
    return h._with_units(info.ids, h._updated_units(info, -1.0))


def uncertainty(h: HessianApprox, f: UncertaintyFunctional) -> float:
    if f.kind == "fisherrf":
        raise ValueError("FisherRF scores a candidate against a state; use score_candidate")
    if h.n_params == 0:
        raise ValueError("empty parameter set")
    return reduce_terms(f, h.terms(f), h.n_params)


def _fisher_score(h: HessianApprox, info: ViewInfo) -> float:
    if len(info.ids) == 0:
        return 0.0
    lam = h.lambda_prior
    if h.kind == "simple":
        return math.fsum((info.diagonals() / (h.diag[info.ids] + lam)).reshape(-1))
    reg = h.blocks[info.ids] + lam * np.eye(h.per_gaussian)
    _, inv = smallmath.chol_logdet_inv(reg)
    # trace(C B^-1) with both symmetric
    return math.fsum((info.grams * inv).reshape(-1))


def _score_with_units(h: HessianApprox, info: ViewInfo, f: UncertaintyFunctional,
                      sign: float = 1.0) -> float:
    prior_terms = h.terms(f)
    if len(info.ids) == 0:
        return reduce_terms(f, prior_terms, h.n_params)
    new = unit_terms(h.kind, f, h._updated_units(info, sign), h.lambda_prior)
    terms = prior_terms.copy()
    terms[info.ids] = new
    return reduce_terms(f, terms, h.n_params)


def score_candidate(h_prior: HessianApprox, vj_candidate: ViewLike, f: UncertaintyFunctional) -> float:
    """Uncertainty after adding the view (lower is better), or FisherRF gain (higher is better)."""
    info = as_info(vj_candidate)
    h_prior._check(info)
    if f.kind == "fisherrf":
        return _fisher_score(h_prior, info)
    return _score_with_units(h_prior, info, f)


def _best(scores: Mapping[str, float], maximize: bool) -> str:
    best_id, best = None, None
    for vid in sorted(scores):
        s = scores[vid]
        if best is None or (s > best if maximize else s < best):
            best_id, best = vid, s
    return best_id


def score_all(h_prior: HessianApprox, candidates: Mapping[str, ViewLike],
              f: UncertaintyFunctional) -> dict[str, float]:
    return {vid: score_candidate(h_prior, c, f) for vid, c in candidates.items()}


def select_next_view(h_prior: HessianApprox, candidates: Mapping[str, ViewLike],
                     f: UncertaintyFunctional) -> str:
    if not candidates:
        raise ValueError("no candidate views to choose from")
    return _best(score_all(h_prior, candidates, f), f.maximize)


@dataclass
class SelectionReport:
    functional: str
    approximation: str
    chosen: list = field(default_factory=list)
    rounds: list = field(default_factory=list)   # [{"picked": id, "scores": {id: float}}]
    mode: str = "add"

    @property
    def scores(self) -> list[dict]:
        return [r["scores"] for r in self.rounds]

    def picked_scores(self) -> list[float]:
        return [r["scores"][r["picked"]] for r in self.rounds]

    def to_dict(self) -> dict:
        d = {"functional": self.functional, "approximation": self.approximation,
             "chosen": list(self.chosen),
             "rounds": [{"picked": r["picked"], "scores": dict(sorted(r["scores"].items()))}
                        for r in self.rounds]}
        if self.mode != "add":
            d["mode"] = self.mode
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionReport":
        return cls(d["functional"], d["approximation"], list(d["chosen"]),
                   [{"picked": r["picked"], "scores": dict(r["scores"])} for r in d["rounds"]],
                   d.get("mode", "add"))


def approximation_label(h: HessianApprox, f: UncertaintyFunctional) -> str:
    # FisherRF is defined on the diagonal; the block form is an extension
    if f.kind == "fisherrf" and h.kind == "block":
        return "block (FisherRF extension)"
    return h.kind


def select_batch(h_prior: HessianApprox, candidates: Mapping[str, ViewLike],
                 f: UncertaintyFunctional, k: int, mode: str = "add") -> SelectionReport:
    """Greedy batch selection without retraining.

    ``mode="add"`` picks ``k`` views one at a time, folding each winner into
    the running Hessian. ``mode="remove"`` starts from all candidates and
    repeatedly drops the view whose removal hurts least until ``k`` remain.
    """
    if k > len(candidates):
        raise ValueError(f"cannot choose {k} views from {len(candidates)} candidates")
    if k < 0:
        raise ValueError("k must be non-negative")
    pool = {vid: as_info(c) for vid, c in candidates.items()}
    report = SelectionReport(str(f), approximation_label(h_prior, f), mode=mode)
    if mode == "add":
        h = h_prior
        for _ in range(k):
            scores = score_all(h, pool, f)
            picked = _best(scores, f.maximize)
            report.rounds.append({"picked": picked, "scores": scores})
            report.chosen.append(picked)
            h = accumulate_hessian(h, pool.pop(picked))
        return report
    if mode != "remove":
        raise ValueError("mode must be 'add' or 'remove'")
    h = h_prior
    for vid in sorted(pool):
        h = accumulate_hessian(h, pool[vid])
    while len(pool) > k:
        if f.kind == "fisherrf":
            # least information relative to everything else kept
            scores = {vid: _fisher_score(remove_view(h, c), c) for vid, c in pool.items()}
            drop = _best(scores, maximize=False)
        else:
            scores = {vid: _score_with_units(h, c, f, -1.0) for vid, c in pool.items()}
            drop = _best(scores, maximize=False)
        report.rounds.append({"picked": drop, "scores": scores})
        h = remove_view(h, pool.pop(drop))
    report.chosen = sorted(pool)
    return report


def view_infos(scene: Scene, views, mask: ParamMask = FULL_MASK) -> dict[str, ViewInfo]:
    """Compact information contributions of ``views`` against ``scene``."""
    return {cam.id: ViewInfo.from_jacobian(view_jacobian(scene, cam, mask)) for cam in views}


def hessian_from_views(scene: Scene, views, kind: str, mask: ParamMask = FULL_MASK,
                       lambda_prior: float = LAMBDA_PRIOR) -> HessianApprox:
    h = HessianApprox.prior(kind, scene, mask, lambda_prior=lambda_prior)
    for cam in views:
        h = accumulate_hessian(h, view_jacobian(scene, cam, mask))
    return h


def select_keyframes(scene: Scene, views: list[CameraView], f: UncertaintyFunctional, k: int,
                     kind: str = "simple", mask: ParamMask = FULL_MASK,
                     lambda_prior: float = LAMBDA_PRIOR) -> SelectionReport:
    """Pick ``k`` of ``views`` for a fixed pre-trained scene, starting from the prior alone."""
    if k > len(views):
        raise ValueError(f"cannot choose {k} keyframes from {len(views)} views")
    infos = view_infos(scene, views, mask)
    h0 = HessianApprox.prior(kind, scene, mask, lambda_prior=lambda_prior)
    return select_batch(h0, infos, f, k)

"""Desk-scale experiment protocols: view selection, keyframes, sparsification, ablation."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .infogain import (
    LAMBDA_PRIOR,
    HessianApprox,
    SelectionReport,
    UncertaintyFunctional,
    accumulate_hessian,
    approximation_label,
    score_all,
    select_batch,
    view_infos,
)
from .metrics import psnr, ssim
from .optimize import LRConfig, Trainer, init_scene
from .render import render
from .scene import FULL_MASK, ParamMask

log = logging.getLogger(__name__)

APPROXIMATIONS = ("simple", "block")
METHOD_FUNCTIONALS = ("uniform", "fisherrf", "t", "a", "d", "e")


@dataclass(frozen=True)
class Method:
    """``{functional}-{approximation}``, e.g. ``d-block``; ``uniform`` ignores scores."""

    functional: str
    approximation: str = "simple"

    @classmethod
    def parse(cls, name: str) -> "Method":
        name = name.strip().lower()
        if name in ("uniform", "uniform-simple", "uniform-block"):
            return cls("uniform", "simple")
        func, _, approx = name.rpartition("-")
        if func in ("e-min", "e-max"):
            pass
        elif not func:
            func, approx = approx, "simple"
        valid = [f"{f}-{a}" for f in METHOD_FUNCTIONALS[1:] for a in APPROXIMATIONS]
        if approx not in APPROXIMATIONS or func.split("-")[0] not in METHOD_FUNCTIONALS[1:]:
            raise ValueError(f"unknown method {name!r}; valid: uniform, {', '.join(valid)} "
                             "(e-min-* and e-max-* pick the E variant)")
        UncertaintyFunctional.parse(func)
        return cls(func, approx)

    @property
    def is_uniform(self) -> bool:
        return self.functional == "uniform"

    @property
    def uncertainty(self) -> UncertaintyFunctional:
        return UncertaintyFunctional.parse(self.functional)

    def __str__(self) -> str:
        return "uniform" if self.is_uniform else f"{self.functional}-{self.approximation}"


@dataclass(frozen=True)
class Schedule:
    start_views: int
    target_views: int
    step_views: int = 1
    iters_per_view: int = 100
    total_steps: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.start_views <= self.target_views:
            raise ValueError("need 1 <= start_views <= target_views")
        if self.step_views < 1:
            raise ValueError("step_views must be >= 1")
        if self.total_steps < self.iters_per_view * self.target_views:
            raise ValueError("total_steps must be >= iters_per_view * target_views")

    def with_seed(self, seed: int) -> "Schedule":
        return replace(self, seed=seed)


# Views start -> target in steps of step_views, training iters_per_view * |views|
# between picks; total step counts are sized for CPU runs.
SCHEDULES = {
    "single10": Schedule(2, 10, 1, 100, 5_000),
    "single20": Schedule(4, 20, 1, 100, 21_000),
    "batch4": Schedule(4, 20, 4, 150, 10_000),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Model-side settings shared by every arm of an experiment."""

    n_gaussians: int = 150
    sh_degree: int = 0
    mask: ParamMask = FULL_MASK
    lambda_prior: float = LAMBDA_PRIOR
    lr: LRConfig = LRConfig()

    def to_dict(self) -> dict:
        return {"n_gaussians": self.n_gaussians, "sh_degree": self.sh_degree,
                "mask": self.mask.ordered(), "lambda_prior": self.lambda_prior,
                "lr": asdict(self.lr)}


@dataclass
class ExperimentResult:
    method: str
    seed: int
    n_views: int
    psnr: float
    ssim: float
    chosen: list
    selection: SelectionReport
    steps: int
    per_view_psnr: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed, "n_views": self.n_views,
                "psnr": self.psnr, "ssim": self.ssim, "chosen": self.chosen,
                "steps": self.steps, "per_view_psnr": self.per_view_psnr,
                "selection": self.selection.to_dict()}


def evaluate(scene, dataset: Dataset, ids: Sequence[str]) -> tuple[float, float, dict]:
    per_view, ssims = {}, []
    for vid in ids:
        img = render(scene, dataset.cameras[vid])
        per_view[vid] = psnr(img, dataset.images[vid])
        ssims.append(ssim(img, dataset.images[vid]))
    return float(np.mean(list(per_view.values()))), float(np.mean(ssims)), per_view


def _fresh_scene(dataset: Dataset, config: ExperimentConfig, seed: int):
    cams = [dataset.cameras[v] for v in dataset.train_ids]
    return init_scene(cams, seed, config.n_gaussians, config.sh_degree, dataset.background)


def run_selection_experiment(dataset: Dataset, method: Method | str, schedule: Schedule,
                             config: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Train, select, repeat: the single-view / batch selection protocol."""
    method = Method.parse(method) if isinstance(method, str) else method
    pool = dataset.train_ids
    if len(pool) < schedule.target_views:
        raise ValueError(f"dataset has {len(pool)} candidate views, schedule needs {schedule.target_views}")
    if not dataset.test_ids:
        raise ValueError("dataset has no held-out test views")
    rng = np.random.default_rng(schedule.seed)
    chosen = sorted(rng.choice(pool, size=schedule.start_views, replace=False).tolist())
    pick_rng = np.random.default_rng([schedule.seed, 1])
    trainer = Trainer(_fresh_scene(dataset, config, schedule.seed), config.lr, schedule.seed)
    report = SelectionReport("uniform" if method.is_uniform else str(method.uncertainty),
                             "none" if method.is_uniform else method.approximation)
    steps = 0
    while len(chosen) < schedule.target_views:
        n_steps = schedule.iters_per_view * len(chosen)
        scene = trainer.run(dataset.views(chosen), n_steps)
        steps += n_steps
        remaining = [v for v in pool if v not in chosen]
        k = min(schedule.step_views, schedule.target_views - len(chosen))
        if method.is_uniform:
            picks = sorted(pick_rng.choice(remaining, size=k, replace=False).tolist())
            for p in picks:
                report.rounds.append({"picked": p, "scores": {}})
        else:
            f = method.uncertainty
            h = HessianApprox.prior(method.approximation, scene, config.mask,
                                    lambda_prior=config.lambda_prior)
            for info in view_infos(scene, [dataset.cameras[v] for v in chosen], config.mask).values():
                h = accumulate_hessian(h, info)
            cands = view_infos(scene, [dataset.cameras[v] for v in remaining], config.mask)
            batch = select_batch(h, cands, f, k)
            report.approximation = approximation_label(h, f)
            report.rounds.extend(batch.rounds)
            picks = batch.chosen
        chosen = chosen + list(picks)
        report.chosen.extend(picks)
        log.info("%s seed=%d v=%d picked %s", method, schedule.seed, len(chosen), picks)
    final = max(schedule.total_steps - steps, 0)
    scene = trainer.run(dataset.views(chosen), final)
    steps += final
    mean_psnr, mean_ssim, per_view = evaluate(scene, dataset, dataset.test_ids)
    return ExperimentResult(str(method), schedule.seed, len(chosen), mean_psnr, mean_ssim,
                            chosen, report, steps, per_view)


def pretrain(dataset: Dataset, ids: Sequence[str], steps: int, seed: int,
             config: ExperimentConfig = ExperimentConfig()):
    trainer = Trainer(_fresh_scene(dataset, config, seed), config.lr, seed)
    return trainer.run(dataset.views(ids), steps)


def run_keyframe_experiment(dataset: Dataset, trained, method: Method | str, k: int, seed: int,
                            retrain_steps: int, config: ExperimentConfig = ExperimentConfig()
                            ) -> ExperimentResult:
    """Pick ``k`` keyframes against a fixed scene, retrain from scratch on them, evaluate."""
    method = Method.parse(method) if isinstance(method, str) else method
    pool = dataset.train_ids
    if k > len(pool):
        raise ValueError(f"cannot choose {k} keyframes from {len(pool)} views")
    if method.is_uniform:
        rng = np.random.default_rng([seed, 2])
        chosen = sorted(rng.choice(pool, size=k, replace=False).tolist())
        report = SelectionReport("uniform", "none", list(chosen),
                                 [{"picked": v, "scores": {}} for v in chosen])
    else:
        infos = view_infos(trained, [dataset.cameras[v] for v in pool], config.mask)
        h0 = HessianApprox.prior(method.approximation, trained, config.mask,
                                 lambda_prior=config.lambda_prior)
        report = select_batch(h0, infos, method.uncertainty, k)
        chosen = list(report.chosen)
    scene = pretrain(dataset, chosen, retrain_steps, seed, config)
    mean_psnr, mean_ssim, per_view = evaluate(scene, dataset, dataset.test_ids)
    return ExperimentResult(str(method), seed, k, mean_psnr, mean_ssim, chosen, report,
                            retrain_steps, per_view)


def spearman(a, b) -> float:
    """Rank correlation of two score sequences (average ranks for ties)."""
    ra, rb = _ranks(np.asarray(a, float)), _ranks(np.asarray(b, float))
    ra, rb = ra - ra.mean(), rb - rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    return float(ra @ rb / den) if den > 0 else 0.0


def _ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(len(x), dtype=float)
    # average ties
    for v in np.unique(x):
        idx = np.flatnonzero(x == v)
        if len(idx) > 1:
            ranks[idx] = ranks[idx].mean()
    return ranks


def decile_curve(ordered_psnr: Sequence[float]) -> list[float]:
    """Cumulative mean of the first 10%, 20%, ... 100% of an ordering."""
    vals = np.asarray(ordered_psnr, dtype=float)
    n = len(vals)
    out = []
    for d in range(1, 11):
        m = max(1, int(math.ceil(d * n / 10)))
        out.append(float(np.mean(vals[:m])))
    return out


@dataclass
class SparsificationResult:
    candidates: list
    psnr: dict                      # candidate -> actual PSNR
    orderings: dict                 # method -> candidate ids, most informative first
    curves: dict                    # method -> 10 cumulative means
    spearman: dict                  # method -> rank correlation with the oracle order
    scores: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, float]]:
        return [(m, 10 * (i + 1), v) for m, curve in self.curves.items() for i, v in enumerate(curve)]

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "psnr": self.psnr, "orderings": self.orderings,
                "curves": self.curves, "spearman": self.spearman, "scores": self.scores}


def run_sparsification(dataset: Dataset, trained, methods: Sequence[Method | str],
                       train_ids: Sequence[str], seed: int = 0,
                       config: ExperimentConfig = ExperimentConfig()) -> SparsificationResult:
    """Order the unused views by expected information and compare with their true PSNR."""
    methods = [Method.parse(m) if isinstance(m, str) else m for m in methods]
    cands = [v for v in dataset.train_ids if v not in set(train_ids)]
    if len(cands) < 2:
        raise ValueError("need at least two candidate views")
    actual = {v: psnr(render(trained, dataset.cameras[v]), dataset.images[v]) for v in cands}
    orderings = {"oracle": sorted(cands, key=lambda v: (actual[v], v))}
    rng = np.random.default_rng([seed, 3])
    orderings["uniform"] = [cands[i] for i in rng.permutation(len(cands))]
    all_scores = {}
    infos_by_mask = {}
    for m in methods:
        if m.is_uniform:
            continue
        f = m.uncertainty
        if config.mask not in infos_by_mask:
            infos_by_mask[config.mask] = (
                view_infos(trained, [dataset.cameras[v] for v in train_ids], config.mask),
                view_infos(trained, [dataset.cameras[v] for v in cands], config.mask))
        prior_infos, cand_infos = infos_by_mask[config.mask]
        h = HessianApprox.prior(m.approximation, trained, config.mask, lambda_prior=config.lambda_prior)
        for info in prior_infos.values():
            h = accumulate_hessian(h, info)
        scores = score_all(h, cand_infos, f)
        sign = -1.0 if f.maximize else 1.0
        orderings[str(m)] = sorted(cands, key=lambda v: (sign * scores[v], v))
        all_scores[str(m)] = scores
    oracle_pos = {v: i for i, v in enumerate(orderings["oracle"])}
    curves, corr = {}, {}
    for name, order in orderings.items():
        curves[name] = decile_curve([actual[v] for v in order])
        corr[name] = spearman(range(len(order)), [oracle_pos[v] for v in order])
    return SparsificationResult(cands, actual, orderings, curves, corr, all_scores)


ABLATION_MASKS = {
    "sh": ("sh",),
    "alpha": ("opacity",),
    "geom": ("position", "rotation", "scale"),
    "none": (),
}


def ablation_mask(name: str) -> ParamMask:
    name = name.strip().lower()
    if name in ABLATION_MASKS:
        return ParamMask.without(ABLATION_MASKS[name])
    return ParamMask.without(g for g in name.split("+") if g)


def run_ablation(dataset: Dataset, schedule: Schedule, masks: Sequence[str],
                 config: ExperimentConfig = ExperimentConfig()) -> dict[str, ExperimentResult]:
    """D-optimality with block Hessians, once per removed-parameter set."""
    resolved = {name: ablation_mask(name) for name in masks}
    return {name: run_selection_experiment(dataset, Method("d", "block"), schedule,
                                           replace(config, mask=mask))
            for name, mask in resolved.items()}


# -- result files --------------------------------------------------------

def fmt(x: float) -> str:
    return format(float(x), ".17g")


def metrics_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "n_views", "psnr", "ssim"])
    for r in results:
        w.writerow([r.method, r.seed, r.n_views, fmt(r.psnr), fmt(r.ssim)])
    return buf.getvalue()


def sparsification_csv(results: Sequence[SparsificationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "decile", "cum_psnr"])
    for res in results:
        for method, decile, value in res.rows():
            w.writerow([method, decile, fmt(value)])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def write_results(out_dir, files: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        if not isinstance(content, str):
            content = json.dumps(content, indent=1, sort_keys=True)
        (out / name).write_text(content)
    return out

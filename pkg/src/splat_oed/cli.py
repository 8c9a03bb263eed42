"""``splat-oed`` command-line interface.

Every command writes a ``config.json`` with its resolved parameters: inside
the output directory for directory outputs, or next to the output file as
``<file>.config.json`` for single-file outputs.
"""
from __future__ import annotations

import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .dataset import RIG_KINDS, SCENE_KINDS, load_dataset, make_reference_scene, make_rig, render_dataset
from .harness import (
    ABLATION_MASKS,
    SCHEDULES,
    ExperimentConfig,
    Method,
    ablation_mask,
    metrics_csv,
    run_ablation,
    run_keyframe_experiment,
    run_selection_experiment,
    run_sparsification,
    sparsification_csv,
    write_results,
)
from .optimize import Trainer, dataset_psnr, init_scene
from .render import render, write_image
from .scene import Scene, load_cameras

THREADS_ENV = "SPLAT_OED_THREADS"


def _apply_threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise click.UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise click.UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    import numba

    with warnings.catch_warnings():
        # picking a threading layer may warn about an old TBB; the fallback is fine
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


def _parse_method(name: str) -> Method:
    try:
        return Method.parse(name)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--method")


def _parse_methods(text: str) -> list[Method]:
    names = [m for m in text.split(",") if m.strip()]
    if not names:
        raise click.BadParameter("no methods given", param_hint="--methods")
    return [_parse_method(m) for m in names]


def _model_config(gaussians: int, sh_degree: int) -> ExperimentConfig:
    return ExperimentConfig(n_gaussians=gaussians, sh_degree=sh_degree)


def _positive(ctx, param, value):
    if value is not None and value < 1:
        raise click.BadParameter("must be >= 1")
    return value


def _non_negative(ctx, param, value):
    if value is not None and value < 0:
        raise click.BadParameter("must be >= 0")
    return value


gaussians_opt = click.option("--gaussians", type=int, default=150, show_default=True,
                             callback=_positive, help="Gaussians in the fitted model.")
sh_opt = click.option("--sh-degree", type=click.IntRange(0, 3), default=0, show_default=True,
                      help="Colour degree of the fitted model.")
seed_opt = click.option("--seed", type=int, required=True, help="Random seed.")


def schedule_opts(f):
    f = click.option("--iters-per-view", type=int, default=None, callback=_positive,
                     help="Override the preset's training steps per selected view.")(f)
    f = click.option("--total-steps", type=int, default=None, callback=_positive,
                     help="Override the preset's total training steps.")(f)
    return f


def _resolve_schedule(name: str, seed: int, total_steps, iters_per_view):
    changes = {"seed": seed}
    if total_steps is not None:
        changes["total_steps"] = total_steps
    if iters_per_view is not None:
        changes["iters_per_view"] = iters_per_view
    try:
        return replace(SCHEDULES[name], **changes)
    except ValueError as exc:
        raise click.UsageError(str(exc))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="splat-oed")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Next-best-view selection for Gaussian splatting scenes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_threads()


@cli.command("gen-dataset")
@click.option("--scene", "scene_kind", type=click.Choice(SCENE_KINDS), required=True)
@click.option("--gaussians", type=int, required=True, callback=_positive)
@click.option("--rig", type=click.Choice(RIG_KINDS), required=True)
@click.option("--views", type=int, required=True, callback=_positive, help="Training/candidate views.")
@click.option("--test-views", type=int, default=12, show_default=True, callback=_non_negative,
              help="Held-out views on a hemisphere lattice.")
@click.option("--width", type=int, default=64, show_default=True, callback=_positive)
@click.option("--height", type=int, default=64, show_default=True, callback=_positive)
@click.option("--radius", type=float, default=4.0, show_default=True)
@click.option("--sh-degree", type=click.IntRange(0, 3), default=0, show_default=True)
@seed_opt
@click.option("--out", type=click.Path(file_okay=False), required=True)
def gen_dataset(scene_kind, gaussians, rig, views, test_views, width, height, radius, sh_degree,
                seed, out):
    """Render a synthetic scene from a camera rig into a dataset directory."""
    if radius <= 1.0:
        raise click.BadParameter("must exceed the scene radius 1", param_hint="--radius")
    scene = make_reference_scene(scene_kind, gaussians, seed=seed, sh_degree=sh_degree)
    train_rig = make_rig(rig, views, radius=radius, seed=seed, width=width, height=height)
    test_rig = make_rig("hemisphere", test_views, radius=radius, seed=seed + 1, width=width,
                        height=height, prefix="t") if test_views else []
    render_dataset(scene, train_rig, out, test_rig)
    _write_json(Path(out) / "config.json", {
        "command": "gen-dataset", "scene": scene_kind, "gaussians": gaussians, "rig": rig,
        "views": views, "test_views": test_views, "width": width, "height": height,
        "radius": radius, "sh_degree": sh_degree, "seed": seed})


@cli.command("render")
@click.option("--scene", "scene_path", type=click.Path(dir_okay=False), required=True)
@click.option("--camera", "camera_path", type=click.Path(dir_okay=False), required=True)
@click.option("--view", "view_id", default=None, help="View id when the camera file holds several.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help=".ppm or .png")
def render_cmd(scene_path, camera_path, view_id, out):
    """Render one view of a scene file."""
    out = Path(out)
    if out.suffix.lower() not in (".ppm", ".png"):
        raise click.BadParameter("output must end in .ppm or .png", param_hint="--out")
    cams = load_cameras(camera_path)
    if view_id is not None:
        match = [c for c in cams if c.id == view_id]
        if not match:
            raise click.BadParameter(f"no view {view_id!r}; valid: {[c.id for c in cams]}",
                                     param_hint="--view")
        cam = match[0]
    elif len(cams) == 1:
        cam = cams[0]
    else:
        raise click.UsageError(f"camera file holds {len(cams)} views; pick one with --view")
    scene = Scene.load(scene_path)
    write_image(render(scene, cam), out)
    _write_json(_sidecar(out), {"command": "render", "scene": str(scene_path),
                                "camera": str(camera_path), "view": cam.id})


@cli.command("train")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), required=True)
@click.option("--steps", type=int, required=True, callback=_non_negative)
@click.option("--views", "view_ids", default=None, help="Comma-separated training view ids (default: all).")
@gaussians_opt
@sh_opt
@seed_opt
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="scene.json to write")
def train_cmd(dataset_dir, steps, view_ids, gaussians, sh_degree, seed, out):
    """Fit a randomly initialised model to the dataset's training views."""
    ds = load_dataset(dataset_dir)
    ids = _view_list(view_ids, ds.train_ids, "--views") if view_ids else ds.train_ids
    cams = [ds.cameras[v] for v in ids]
    scene = init_scene(cams, seed, gaussians, sh_degree, ds.background)
    trainer = Trainer(scene, seed=seed)
    scene = trainer.run(ds.views(ids), steps)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene.save(out)
    _write_json(_sidecar(out), {
        "command": "train", "dataset": str(dataset_dir), "steps": steps, "views": ids,
        "gaussians": gaussians, "sh_degree": sh_degree, "seed": seed,
        "train_psnr": dataset_psnr(scene, ds.views(ids))})


def _view_list(text: str, valid: list[str], hint: str) -> list[str]:
    ids = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in ids if v not in valid]
    if bad:
        raise click.BadParameter(f"unknown view ids {bad}; valid: {valid}", param_hint=hint)
    return ids


@cli.command("select")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), required=True)
@click.option("--method", required=True, help="uniform or {fisherrf|t|a|d|e}-{simple|block}")
@click.option("--schedule", type=click.Choice(sorted(SCHEDULES)), required=True)
@schedule_opts
@gaussians_opt
@sh_opt
@seed_opt
@click.option("--out", type=click.Path(file_okay=False), required=True)
def select_cmd(dataset_dir, method, schedule, total_steps, iters_per_view, gaussians, sh_degree,
               seed, out):
    """Active view selection with retraining between picks."""
    m = _parse_method(method)
    sched = _resolve_schedule(schedule, seed, total_steps, iters_per_view)
    config = _model_config(gaussians, sh_degree)
    ds = load_dataset(dataset_dir)
    result = run_selection_experiment(ds, m, sched, config)
    write_results(out, {
        "config.json": {"command": "select", "dataset": str(dataset_dir), "method": str(m),
                        "schedule": schedule, "schedule_params": _schedule_dict(sched),
                        "model": config.to_dict(), "seed": seed},
        "report.json": result.to_dict(),
        "selection.json": result.selection.to_dict(),
        "metrics.csv": metrics_csv([result]),
    })


def _schedule_dict(s) -> dict:
    return {"start_views": s.start_views, "target_views": s.target_views, "step_views": s.step_views,
            "iters_per_view": s.iters_per_view, "total_steps": s.total_steps, "seed": s.seed}


@cli.command("keyframes")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), required=True)
@click.option("--scene", "scene_path", type=click.Path(dir_okay=False), required=True)
@click.option("--k", type=int, required=True, callback=_positive)
@click.option("--method", required=True)
@click.option("--retrain-steps", type=int, default=1500, show_default=True, callback=_non_negative)
@gaussians_opt
@sh_opt
@seed_opt
@click.option("--out", type=click.Path(file_okay=False), required=True)
def keyframes_cmd(dataset_dir, scene_path, k, method, retrain_steps, gaussians, sh_degree, seed, out):
    """Pick k keyframes against a trained scene, retrain on them, evaluate."""
    m = _parse_method(method)
    config = _model_config(gaussians, sh_degree)
    ds = load_dataset(dataset_dir)
    if k > len(ds.train_ids):
        raise click.BadParameter(f"only {len(ds.train_ids)} candidate views", param_hint="--k")
    trained = Scene.load(scene_path)
    result = run_keyframe_experiment(ds, trained, m, k, seed, retrain_steps, config)
    write_results(out, {
        "config.json": {"command": "keyframes", "dataset": str(dataset_dir), "scene": str(scene_path),
                        "k": k, "method": str(m), "retrain_steps": retrain_steps,
                        "model": config.to_dict(), "seed": seed},
        "report.json": result.to_dict(),
        "selection.json": result.selection.to_dict(),
        "metrics.csv": metrics_csv([result]),
    })


@cli.command("sparsify")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), required=True)
@click.option("--scene", "scene_path", type=click.Path(dir_okay=False), required=True)
@click.option("--methods", required=True, help="Comma-separated method names.")
@click.option("--train-views", default=None,
              help="Comma-separated ids the scene was trained on (excluded from the candidates).")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the uniform ordering.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def sparsify_cmd(dataset_dir, scene_path, methods, train_views, seed, out):
    """Order unused views by expected information and compare with their true error."""
    ms = _parse_methods(methods)
    ds = load_dataset(dataset_dir)
    used = _view_list(train_views, ds.train_ids, "--train-views") if train_views else []
    trained = Scene.load(scene_path)
    result = run_sparsification(ds, trained, ms, used, seed)
    write_results(out, {
        "config.json": {"command": "sparsify", "dataset": str(dataset_dir), "scene": str(scene_path),
                        "methods": [str(m) for m in ms], "train_views": used, "seed": seed},
        "sparsification.json": result.to_dict(),
        "sparsification.csv": sparsification_csv([result]),
    })


@cli.command("ablate")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), required=True)
@click.option("--masks", required=True, help=f"Comma-separated: {', '.join(ABLATION_MASKS)}")
@click.option("--schedule", type=click.Choice(sorted(SCHEDULES)), default="single10", show_default=True)
@schedule_opts
@gaussians_opt
@sh_opt
@seed_opt
@click.option("--out", type=click.Path(file_okay=False), required=True)
def ablate_cmd(dataset_dir, masks, schedule, total_steps, iters_per_view, gaussians, sh_degree,
               seed, out):
    """D-optimal block selection with parameter groups removed from the information."""
    names = [n.strip().lower() for n in masks.split(",") if n.strip()]
    if not names:
        raise click.BadParameter("no masks given", param_hint="--masks")
    for n in names:
        if n not in ABLATION_MASKS:
            raise click.BadParameter(f"unknown mask {n!r}; valid: {', '.join(ABLATION_MASKS)}",
                                     param_hint="--masks")
        ablation_mask(n)
    sched = _resolve_schedule(schedule, seed, total_steps, iters_per_view)
    config = _model_config(gaussians, sh_degree)
    ds = load_dataset(dataset_dir)
    results = run_ablation(ds, sched, names, config)
    rows = [replace(r, method=f"d-block/no-{n}") for n, r in results.items()]
    write_results(out, {
        "config.json": {"command": "ablate", "dataset": str(dataset_dir), "masks": names,
                        "schedule": schedule, "schedule_params": _schedule_dict(sched),
                        "model": config.to_dict(), "seed": seed},
        "report.json": {n: r.to_dict() for n, r in results.items()},
        "metrics.csv": metrics_csv(rows),
    })


def main(argv=None) -> int:
    """Entry point; errors become a single ``error: ...`` line and a nonzero exit."""
    try:
        rv = cli.main(args=argv, prog_name="splat-oed", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}".replace("\n", " "), err=True)
        return exc.exit_code
    except (ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        click.echo(f"error: {msg}".replace("\n", " "), err=True)
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())

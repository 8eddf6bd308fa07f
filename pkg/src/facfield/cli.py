"""Command-line surface: bake / train / render / eval / ablate.

Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 numerical abort,
5 artifact mismatch. Every subcommand is deterministic given its seed.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import ConfigError, ExperimentConfig
from .mesh import NoSurface, chamfer_and_nc, marching_cubes, \
    marching_cubes_fn, save_obj
from .metrics import psnr, ssim
from .render import FieldSceneAdapter, render_image
from .scene import SCENES, DatasetError, bake_dataset, load_dataset
from .skeleton import Pose, forward_kinematics
from .train import (TrainingAborted, UnknownAblation, ablation_mode,
                    load_trained, train)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

SCHEMA_PATH = Path(__file__).parent / "schemas" / "report.schema.json"


def _apply_thread_cap():
    cap = os.environ.get("FACFIELD_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(cap))
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


@click.group()
def main():
    """Factorized neural avatar fields at desk scale."""
    _apply_thread_cap()


@main.command()
@click.option("--scene", type=click.Choice(sorted(SCENES)), default="elbow")
@click.option("--views", type=int, default=8)
@click.option("--poses", type=int, default=10)
@click.option("--res", type=int, default=128)
@click.option("--seed", type=int, default=0)
@click.option("--steps", type=int, default=1024)
@click.option("--out", required=True, type=click.Path())
def bake(scene, views, poses, res, seed, steps, out):
    """Render the analytic ground-truth scene to a dataset directory."""
    avatar = SCENES[scene]()
    try:
        manifest = bake_dataset(avatar, views, poses, res, seed, out,
                                n_steps=steps)
    except OSError as e:
        click.echo(f"I/O failure: {e}", err=True)
        sys.exit(EXIT_IO)
    except ValueError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_USAGE)
    click.echo(str(manifest))


def _load_experiment(config, dataset, out, ablation):
    try:
        cfg = ExperimentConfig.load(config)
    except ConfigError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_USAGE)
    if dataset:
        cfg.dataset = dataset
    if out:
        cfg.out_dir = out
    if ablation:
        cfg.train.ablation = ablation
    try:
        ablation_mode(cfg.train.ablation)
    except UnknownAblation as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_USAGE)
    return cfg


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--dataset", type=click.Path(), default=None,
              help="override the config's dataset path")
@click.option("--out", type=click.Path(), default=None,
              help="override the config's output directory")
@click.option("--ablation", default=None,
              help="full | no-s1c1 | no-s2c2 | no-lcom | no-feat | pose-lf "
                   "| freq:X,Y")
def cmd_train(config_path, dataset, out, ablation):
    """Train a model from an experiment config."""
    cfg = _load_experiment(config_path, dataset, out, ablation)
    try:
        ds = load_dataset(cfg.dataset)
    except (DatasetError, OSError) as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_IO)
    try:
        res = train(ds, cfg.train, cfg.out_dir, field_cfg=cfg.field)
    except TrainingAborted as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(str(res.checkpoint_path))


def _load_model(checkpoint, ds):
    try:
        fp, pose_params, meta = load_trained(checkpoint)
    except (ValueError, OSError, KeyError) as e:
        click.echo(f"cannot load checkpoint: {e}", err=True)
        sys.exit(EXIT_MISMATCH)
    if fp.cfg.n_pose_dims != ds.skeleton.n_pose_dims:
        click.echo(f"checkpoint expects {fp.cfg.n_pose_dims} pose dims but "
                   f"the dataset skeleton has {ds.skeleton.n_pose_dims}",
                   err=True)
        sys.exit(EXIT_MISMATCH)
    return fp, pose_params, meta


def _frame_adapter(fp, ds, frame_idx, mode, pose_params, temperature=0.05,
                   posed=None):
    """Build a render adapter for one dataset frame.

    The standalone "independent" mode renders the canonical (rest-pose)
    avatar, so its output depends on the camera alone and is identical
    across poses; pass posed=True to render that branch through the frame's
    deformation instead (used for residual images).
    """
    fr = ds.frames[frame_idx]
    if posed is None:
        posed = mode != "independent"
    theta = pose_params.get(fr.pose.frame_id, fr.pose.theta)
    if not posed:
        theta = np.zeros_like(np.asarray(theta, float))
    tfs = forward_kinematics(ds.skeleton, Pose(theta, fr.pose.frame_id))
    return FieldSceneAdapter(fp, ds.skeleton, tfs, theta, mode, temperature), fr


def _save_png(path, arr):
    img = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--frame", type=int, default=0)
@click.option("--mode",
              type=click.Choice(["full", "independent", "dependent-residual"]),
              default="full")
@click.option("--amplify", type=float, default=5.0,
              help="gain for the dependent-residual difference image")
@click.option("--samples", type=int, default=96)
@click.option("--out", required=True, type=click.Path())
def render(checkpoint, dataset, frame, mode, amplify, samples, out):
    """Render a dataset frame from a trained checkpoint."""
    ds = load_dataset(dataset)
    fp, pose_params, _ = _load_model(checkpoint, ds)
    if not (0 <= frame < len(ds.frames)):
        click.echo(f"frame {frame} out of range", err=True)
        sys.exit(EXIT_USAGE)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bg = ds.background

    def one(render_mode, posed=None):
        adapter, fr = _frame_adapter(fp, ds, frame, render_mode, pose_params,
                                     posed=posed)
        return render_image(adapter, fr.camera, ds.bounds, samples, bg)

    if mode == "dependent-residual":
        # both terms rendered through the frame's deformation so the
        # difference isolates the high-frequency residual branch
        rgb_full, normal, wsum = one("full")
        rgb_ind, _, _ = one("independent", posed=True)
        rgb = np.clip(amplify * np.abs(rgb_full - rgb_ind), 0.0, 1.0)
    else:
        rgb, normal, wsum = one(mode)
    stem = f"{frame:04d}_{mode}"
    _save_png(out / f"{stem}.png", rgb)
    _save_png(out / f"{stem}_normal.png", normal)
    _save_png(out / f"{stem}_wsum.png", np.clip(wsum, 0, 1))
    click.echo(str(out / f"{stem}.png"))


def _psnr_json(x):
    return "inf" if math.isinf(x) else x


def evaluate_split(fp, ds, split, mode, samples, pose_params,
                   geometry=False, mesh_res=64):
    """Shared eval core; returns the report dict (schema-conformant)."""
    ids = ds.splits.get(split, [])
    frames = []
    for i in ids:
        adapter, fr = _frame_adapter(fp, ds, i, mode, pose_params)
        rgb, _, _ = render_image(adapter, fr.camera, ds.bounds, samples,
                                 ds.background)
        gt = ds.image(i)
        frames.append({"frame": int(i), "psnr": psnr(rgb, gt),
                       "ssim": ssim(rgb, gt)})
    finite = [f["psnr"] for f in frames if math.isfinite(f["psnr"])]
    agg_psnr = float(np.mean(finite)) if finite else math.inf
    report = {"mode": mode, "split": split,
              "aggregate": {"psnr": _psnr_json(agg_psnr),
                            "ssim": float(np.mean([f["ssim"]
                                                   for f in frames]))},
              "frames": [{**f, "psnr": _psnr_json(f["psnr"])}
                         for f in frames]}
    if geometry:
        mesh = marching_cubes(fp, mesh_res, ds.bounds, mode="independent")
        oracle = marching_cubes_fn(lambda p: ds.avatar.capsule_sdf(p),
                                   mesh_res, ds.bounds)
        cd, nc = chamfer_and_nc(mesh, oracle, 4096, seed=0)
        report["geometry"] = {"cd": cd, "nc": nc,
                              "mesh_resolution": mesh_res}
    return report


def validate_report(report):
    import jsonschema
    with open(SCHEMA_PATH) as f:
        schema = json.load(f)
    jsonschema.validate(report, schema)


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["train", "val", "test"]),
              default="train")
@click.option("--mode", type=click.Choice(["full", "independent",
                                           "dependent"]), default="full")
@click.option("--samples", type=int, default=96)
@click.option("--geometry", is_flag=True)
@click.option("--mesh-res", type=int, default=64)
@click.option("--mesh-out", type=click.Path(), default=None,
              help="also export the extracted mesh as OBJ")
@click.option("--out", required=True, type=click.Path())
def cmd_eval(checkpoint, dataset, split, mode, samples, geometry, mesh_res,
             mesh_out, out):
    """Evaluate a checkpoint on a dataset split; writes a JSON report."""
    ds = load_dataset(dataset)
    fp, pose_params, _ = _load_model(checkpoint, ds)
    if not ds.splits.get(split):
        click.echo(f"split {split!r} is empty", err=True)
        sys.exit(EXIT_USAGE)
    try:
        report = evaluate_split(fp, ds, split, mode, samples, pose_params,
                                geometry=geometry, mesh_res=mesh_res)
    except NoSurface as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_NUMERIC)
    report["checkpoint"] = str(checkpoint)
    report["dataset"] = str(dataset)
    validate_report(report)
    if mesh_out:
        save_obj(mesh_out, marching_cubes(fp, mesh_res, ds.bounds,
                                          mode="independent"))
    with open(out, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    click.echo(str(out))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--tags", required=True,
              help="comma-separated ablation tags, e.g. full,no-lcom")
@click.option("--out", required=True, type=click.Path())
def ablate(config_path, tags, out):
    """Train and evaluate a list of ablations under identical budgets."""
    tag_list = [t.strip() for t in tags.split(",") if t.strip()]
    if not tag_list:
        click.echo("no ablation tags given", err=True)
        sys.exit(EXIT_USAGE)
    for tag in tag_list:
        try:
            ablation_mode(tag)
        except UnknownAblation as e:
            click.echo(str(e), err=True)
            sys.exit(EXIT_USAGE)
    cfg = _load_experiment(config_path, None, None, None)
    ds = load_dataset(cfg.dataset)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tag in tag_list:
        row = {"tag": tag, "status": "ok", "train_psnr": None,
               "novel_pose_psnr": None, "independent_psnr": None}
        try:
            from dataclasses import replace
            tcfg = replace(cfg.train, ablation=tag)
            res = train(ds, tcfg, out / tag.replace(":", "_").replace(",", "_"),
                        field_cfg=cfg.field)
            mode = ablation_mode(tag).render_mode
            rep = evaluate_split(res.fp, ds, "train", mode, 64,
                                 res.pose_params)
            row["train_psnr"] = rep["aggregate"]["psnr"]
            if ds.splits.get("val"):
                rep_np = evaluate_split(res.fp, ds, "val", mode, 64,
                                        res.pose_params)
                row["novel_pose_psnr"] = rep_np["aggregate"]["psnr"]
            if mode == "full":
                rep_ind = evaluate_split(res.fp, ds, "train", "independent",
                                         64, res.pose_params)
                row["independent_psnr"] = rep_ind["aggregate"]["psnr"]
        except (TrainingAborted, DatasetError, OSError, ValueError) as e:
            row["status"] = f"failed: {e}"
        rows.append(row)
        click.echo(f"{row['tag']}: {row['status']} "
                   f"train={row['train_psnr']} novel={row['novel_pose_psnr']}")
    with open(out / "ablations.json", "w") as f:
        json.dump(rows, f, indent=1, sort_keys=True)
    with open(out / "ablations.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["tag", "status", "train_psnr",
                                               "novel_pose_psnr",
                                               "independent_psnr"])
        writer.writeheader()
        writer.writerows(rows)
    click.echo(str(out / "ablations.json"))


if __name__ == "__main__":
    main()

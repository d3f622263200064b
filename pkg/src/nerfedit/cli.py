"""Batch entry points for every pipeline stage and for acceptance runs.

Each subcommand writes a JSON run manifest (config hash, timings, outputs)
next to its artifacts so any run can be reproduced from its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import acceptance
from .distill import build_blended_dataset, distill
from .errors import ContractError
from .grids import VoxelGrid
from .metrics import background_mse, sparsity_metric, warp_consistency, weight_tv
from .palette import EditSession, PaletteEdit, PaletteModel, train_edit
from .radiance import (RadianceField, finalize_occupancy, render_image, train)
from .cameras import arc_rig, orbit_rig
from .scenes import (RayDataset, build_scene, default_rig, generate_dataset,
                     object_mask, render_view)
from .selection import extract_dataset, replay_selection
from .style import FeatureExtractor, LossWeights, StyleConfig, load_style_image

from PIL import Image
from . import autodiff as ad


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, subcommand: str, config: dict, started: float,
                   outputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "config_hash": _config_hash(config),
        "seconds": round(time.time() - started, 3),
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _lambda_overrides(args) -> dict:
    out = {}
    for key in ("style", "tv", "dd", "weight", "offset", "smooth"):
        value = getattr(args, f"lambda_{key}", None)
        if value is not None:
            out[key] = value
    return out


def _edit_lambdas(mode: str, overrides: dict) -> LossWeights:
    lambdas = LossWeights.desk_recolor() if mode == "recolor" else LossWeights.desk_style()
    for key, value in overrides.items():
        setattr(lambdas, key, float(value))
    return lambdas


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    started = time.time()
    scene = build_scene(args.scene)
    rig = default_rig(scene, n_views=args.views, width=args.size, height=args.size)
    out = Path(args.out)
    generate_dataset(scene, rig, out, seed=args.seed, n_quad=args.n_quad,
                     threads=args.threads)
    write_manifest(out, "gen-scene", _args_config(args), started,
                   {"views": rig.n_views, "size": args.size})
    print(f"wrote {rig.n_views} views to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    ds = RayDataset(args.dataset)
    aabb = ds.aabb if ds.aabb is not None else np.array([[-1, -1, -1], [1, 1, 1]], np.float32)
    field = RadianceField.desk(aabb, seed=args.seed)
    state = train(field, ds, iters=args.iters, batch_rays=args.batch_rays,
                  seed=args.seed)
    finalize_occupancy(field, seed=args.seed)
    out = Path(args.out)
    field.save(out / "field")
    write_manifest(out, "train", _args_config(args), started,
                   {"final_loss": state.log[-1][1] if state.log else None,
                    "iterations": state.iteration,
                    "occupied_fraction": float(field.occupancy.bits.mean())})
    print(f"trained field saved under {out}/field (loss "
          f"{state.log[-1][1]:.3e})" if state.log else f"saved {out}/field")
    return 0


def cmd_select_replay(args) -> int:
    started = time.time()
    ds = RayDataset(args.dataset)
    field = RadianceField.load(Path(args.checkpoint) / "field")
    session = json.loads(Path(args.replay).read_text())
    grid, queue = replay_selection(field, ds, session, resolution=args.grid_res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid.save(out / "edit.grid")
    from .selection import make_growing_grid

    growing = make_growing_grid(grid, queue)
    growing.save(out / "growing.grid")
    write_manifest(out, "select-replay", _args_config(args), started,
                   {"voxels": grid.count(), "frontier": growing.count()})
    print(f"selection: {grid.count()} voxels ({growing.count()} frontier)")
    return 0


def cmd_edit(args) -> int:
    started = time.time()
    ds = RayDataset(args.dataset)
    field = RadianceField.load(Path(args.checkpoint) / "field")
    edit_grid = VoxelGrid.load(Path(args.selection) / "edit.grid", aabb=field.aabb)
    growing = None
    grow_file = Path(args.selection) / "growing.grid"
    if args.use_growing and grow_file.exists():
        growing = VoxelGrid.load(grow_file, aabb=field.aabb)
        if growing.count() == 0:
            growing = None
    eds = extract_dataset(field, edit_grid, ds, growing=growing,
                          r_grow=args.r_grow, threads=args.threads)
    overrides = _lambda_overrides(args)
    lambdas = _edit_lambdas(args.mode, overrides)
    style_cfg = None
    if args.mode == "style":
        if not args.style_image:
            raise ContractError("style mode requires --style-image")
        style_cfg = StyleConfig(image=load_style_image(args.style_image))
    session = EditSession(dataset=eds, mode=args.mode, iters=args.iters,
                          lambdas=lambdas, style=style_cfg, seed=args.seed)
    lo = eds.x_term.min(axis=0) - 1e-3
    hi = eds.x_term.max(axis=0) + 1e-3
    model = PaletteModel(np.stack([lo, hi]), seed=args.seed)
    train_edit(session, model=model)

    edit = PaletteEdit.identity(model.palette.data)
    if args.swap_dominant:
        target = np.asarray([float(v) for v in args.swap_dominant.split(",")],
                            dtype=np.float32)
        with ad.no_grad():
            w, _ = model.weights_offsets(eds.x_term, eds.dirs)
        dominant = int(np.argmax(np.where(model.active_mask, w.data.mean(axis=0), -1)))
        edit.p_mod[dominant] = target
    if args.palette_edit:
        edit = PaletteEdit.from_json(Path(args.palette_edit).read_text())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "palette")
    (out / "palette_edit.json").write_text(edit.to_json())
    edit_grid.save(out / "edit.grid")
    if growing is not None:
        growing.save(out / "growing.grid")
    np.save(out / "transition_points.npy",
            eds.transition_points if eds.transition_points is not None
            else np.zeros((0, 3), np.float32))
    lambdas_used = lambdas.to_dict()
    write_manifest(out, "edit", _args_config(args), started, {
        "records": eds.n_records,
        "mode": args.mode,
        "lambdas": lambdas_used,
        "style_losses_disabled": args.mode == "recolor",
        "active_palettes": int(model.active_mask.sum()),
        "final_losses": session.log.get("final", {}),
        "removal": session.log.get("removal"),
    })
    print(f"edit session done: {eds.n_records} records, "
          f"{int(model.active_mask.sum())} active palettes")
    return 0


def cmd_distill(args) -> int:
    started = time.time()
    ds = RayDataset(args.dataset)
    field = RadianceField.load(Path(args.checkpoint) / "field")
    edit_dir = Path(args.editdir)
    model = PaletteModel.load(edit_dir / "palette")
    edit = PaletteEdit.from_json((edit_dir / "palette_edit.json").read_text())
    edit_grid = VoxelGrid.load(edit_dir / "edit.grid", aabb=field.aabb)
    growing = None
    if (edit_dir / "growing.grid").exists():
        growing = VoxelGrid.load(edit_dir / "growing.grid", aabb=field.aabb)
        if growing.count() == 0:
            growing = None
    eds = extract_dataset(field, edit_grid, ds, growing=growing,
                          r_grow=args.r_grow, threads=args.threads)
    out = Path(args.out)
    blended, provenance = build_blended_dataset(model, edit, ds, eds, out / "blended")
    iters = args.iters or int(0.7 * 3000)
    state, traj = distill(field, blended, iters=iters, seed=args.seed + 1)
    finalize_occupancy(field, seed=args.seed)
    field.save(out / "field")
    write_manifest(out, "distill", _args_config(args), started, {
        "iterations": state.iteration,
        "trajectory": traj,
        "blended_views": blended.n_views,
    })
    print(f"distilled field saved under {out}/field")
    return 0


def cmd_render(args) -> int:
    started = time.time()
    field = RadianceField.load(Path(args.checkpoint) / "field")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        ds = RayDataset(args.dataset)
        poses = ds.poses
        width, height, focal = ds.width, ds.height, ds.focal
    else:
        rig = orbit_rig(args.views, radius=1.5 * float(
            (field.aabb[1] - field.aabb[0]).max()), width=args.size, height=args.size)
        poses = rig.poses
        width, height, focal = rig.width, rig.height, rig.focal
    indices = [args.pose_index] if args.pose_index is not None else range(len(poses))
    written = []
    for k in indices:
        img = render_image(field, poses[k], width, height, focal)
        data = (np.clip(img["color"], 0, 1) * 255).round().astype(np.uint8)
        name = f"render_{k:03d}.png"
        Image.fromarray(data).save(out / name)
        written.append(name)
    write_manifest(out, "render", _args_config(args), started, {"frames": written})
    print(f"rendered {len(written)} frames to {out}")
    return 0


def cmd_metrics(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = []
    config = _args_config(args)
    chash = _config_hash(config)

    if args.before and args.after:
        scene = build_scene(args.scene)
        before_ds = RayDataset(args.before)
        after_ds = RayDataset(args.after)
        rig = before_ds.rig()
        masks = np.stack([object_mask(scene, rig, v, args.object)
                          for v in range(before_ds.n_views)])
        before = np.stack([_composite_white(before_ds, v) for v in range(before_ds.n_views)])
        after = np.stack([_composite_white(after_ds, v) for v in range(after_ds.n_views)])
        report.append({"metric": "background_mse",
                       "value": background_mse(before, after, masks),
                       "views": before_ds.n_views, "config": chash})

    if args.checkpoint and args.scene:
        field = RadianceField.load(Path(args.checkpoint) / "field")
        scene = build_scene(args.scene)
        rig = arc_rig(10, radius=1.5 * scene.scale, width=args.size, height=args.size)
        renders, depths = [], []
        for v in range(rig.n_views):
            view = render_view(scene, rig, v, n_quad=512)
            depths.append(view["depth"])
            renders.append(render_image(field, rig.poses[v], args.size, args.size,
                                        rig.focal)["color"])
        for delta in (1, 7):
            res = warp_consistency(np.stack(renders), np.stack(depths),
                                   np.stack(rig.poses), args.size, args.size,
                                   rig.focal, delta=delta, scene_scale=scene.scale,
                                   extractor=FeatureExtractor.seeded_random())
            report.append({"metric": f"e_warp_delta{delta}", "value": res["e_warp"],
                           "views": rig.n_views, "config": chash,
                           "perceptual_stub": res["feature_distance_stub"]})

    if args.editdir:
        model = PaletteModel.load(Path(args.editdir) / "palette")
        ds = RayDataset(args.dataset)
        field = RadianceField.load(Path(args.checkpoint) / "field")
        edit_grid = VoxelGrid.load(Path(args.editdir) / "edit.grid", aabb=field.aabb)
        eds = extract_dataset(field, edit_grid, ds, threads=args.threads)
        with ad.no_grad():
            w, _ = model.weights_offsets(eds.x_term, eds.dirs)
        report.append({"metric": "sparsity", "value": sparsity_metric(w.data),
                       "views": ds.n_views, "config": chash})
        imgs = np.zeros((model.n_palette, ds.height, ds.width), np.float32)
        rows = eds.view_records(0)
        pix = eds.pixels[rows]
        imgs[:, pix[:, 0], pix[:, 1]] = w.data[rows].T
        report.append({"metric": "weight_tv", "value": weight_tv(imgs),
                       "views": 1, "config": chash})

    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    write_manifest(out, "metrics", config, started, {"metrics": len(report)})
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _composite_white(ds: RayDataset, view: int) -> np.ndarray:
    px = ds.pixels_float(view)
    return (px[:, :3] * px[:, 3:4] + (1 - px[:, 3:4])).reshape(ds.height, ds.width, 3)


def cmd_serve(args) -> int:
    from .service import serve_forever

    port = args.port or int(os.environ.get("NERFEDIT_PORT", "8629"))
    data_root = args.out or os.environ.get("NERFEDIT_DATA_ROOT", "./nerfedit_data")
    serve_forever(data_root, port=port, seed=args.seed)
    return 0


def cmd_accept(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    only = args.only.split(",") if args.only else None
    result = acceptance.run_suite(out / "work", only=only, seed=args.seed,
                                  threads=args.threads, quick=args.quick)
    (out / "metrics.json").write_text(
        json.dumps(result["metrics"], indent=1, sort_keys=True))
    config = _args_config(args)
    write_manifest(out, "accept", config, started,
                   {"passed": result["passed"], "timings": result["timings"]})
    print(f"acceptance {'PASSED' if result['passed'] else 'FAILED'}; "
          f"metrics written to {out}/metrics.json")
    return 0 if result["passed"] else 1


def _args_config(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nerfedit",
        description="Local recoloring and stylization of radiance fields")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, required=True, help="rng seed")
        p.add_argument("--threads", type=int, default=4)

    p = sub.add_parser("gen-scene", help="render a procedural dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-quad", type=int, default=1024)
    common(p)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="fit a radiance field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch-rays", type=int, default=1024)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select-replay", help="re-run a serialized selection session")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="directory holding field/")
    p.add_argument("--replay", required=True, help="selection session JSON")
    p.add_argument("--grid-res", type=int, default=128)
    common(p)
    p.set_defaults(func=cmd_select_replay)

    p = sub.add_parser("edit", help="train the palette model over a selection")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--selection", required=True, help="directory with edit.grid")
    p.add_argument("--mode", choices=("recolor", "style"), default="recolor")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--style-image")
    p.add_argument("--r-grow", type=float, default=None)
    p.add_argument("--use-growing", action="store_true",
                   help="use growing.grid for smooth transitions")
    p.add_argument("--swap-dominant", help="recolor target 'r,g,b' for the "
                   "dominant base color")
    p.add_argument("--palette-edit", help="palette edit JSON to apply")
    for key in ("style", "tv", "dd", "weight", "offset", "smooth"):
        p.add_argument(f"--lambda-{key}", type=float, default=None,
                       dest=f"lambda_{key}")
    common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("distill", help="bake a palette edit into the field")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--editdir", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--r-grow", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("render", help="render poses from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="render this dataset's poses")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pose-index", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="evaluation report as JSON")
    p.add_argument("--scene", default="two-spheres")
    p.add_argument("--object", default="sphere_a")
    p.add_argument("--before")
    p.add_argument("--after")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--editdir")
    p.add_argument("--size", type=int, default=64)
    common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("serve", help="run the interactive editing service")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--out", help="data root (or NERFEDIT_DATA_ROOT)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=4)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("accept", help="run the acceptance suite")
    p.add_argument("--suite", default="primary", choices=("primary",))
    p.add_argument("--only", help="comma-separated criterion subset")
    p.add_argument("--quick", action="store_true",
                   help="miniature profile for smoke runs")
    common(p)
    p.set_defaults(func=cmd_accept)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ContractError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

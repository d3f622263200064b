"""Distillation: bake palette edits into the radiance field.

A blended dataset replaces each recorded pixel's color with
T_alpha * c_hat + (1 - T_alpha) * C and copies every other pixel byte-for-
byte; fine-tuning the field on it makes the edit permanent without touching
the background.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoints import load_fragments, save_fragments
from .errors import ContractError
from .palette import PaletteEdit, PaletteModel
from .radiance import RadianceField, TrainState, fine_tune, make_train_state, render_image
from .scenes import RayDataset
from .selection import EditDataset

PROVENANCE_ORIGINAL = 0
PROVENANCE_EDITED = 1
PROVENANCE_TRANSITION = 2

_PROVENANCE_COLORS = [0, 0, 0, 230, 80, 40, 60, 140, 230]  # paletted PNG entries


def build_blended_dataset(model: PaletteModel, edit: PaletteEdit | None,
                          dataset: RayDataset, edit_dataset: EditDataset,
                          out_dir: str | Path,
                          orientation: str = "core-modified") -> tuple[RayDataset, np.ndarray]:
    """Write the distillation targets as a sibling dataset.

    Pixels with a ray record get the blended color; all other pixels are
    copied from the source images unchanged. Returns the loaded blended
    dataset and the per-pixel provenance map (0 original / 1 edited /
    2 transition).
    """
    if edit_dataset.record_index.shape[0] != dataset.n_views:
        raise ContractError("edit dataset does not match the source dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = dataset.height, dataset.width
    provenance = np.zeros((dataset.n_views, h, w), dtype=np.uint8)

    meta = json.loads((Path(dataset.root) / "transforms.json").read_text())
    for extra in ("scene.json",):
        src = Path(dataset.root) / extra
        if src.exists():
            shutil.copyfile(src, out_dir / extra)

    for v in range(dataset.n_views):
        name = meta["frames"][v]["file_path"].split("/")[-1]
        img = dataset.images[v].copy()
        rows = edit_dataset.view_records(v)
        if rows.size:
            x_term = edit_dataset.x_term[rows]
            dirs = edit_dataset.dirs[rows]
            d_trans = edit_dataset.d_trans[rows]
            t_alpha = edit_dataset.t_alpha[rows][:, None]
            c_hat = model.compose_color(x_term, dirs, edit=edit, d_trans=d_trans,
                                        orientation=orientation)
            gt = edit_dataset.gt_rgb[rows]
            target = t_alpha * c_hat + (1.0 - t_alpha) * gt
            pi = edit_dataset.pixels[rows, 0]
            pj = edit_dataset.pixels[rows, 1]
            img[pi, pj, :3] = np.clip(np.round(target * 255.0), 0, 255).astype(np.uint8)
            provenance[v, pi, pj] = np.where(d_trans > 0.0,
                                             PROVENANCE_TRANSITION, PROVENANCE_EDITED)
        Image.fromarray(img, "RGBA").save(out_dir / f"{name}.png")
        depth_src = Path(dataset.root) / f"{name}.depth"
        if depth_src.exists():
            shutil.copyfile(depth_src, out_dir / f"{name}.depth")
        pal = Image.fromarray(provenance[v], "P")
        pal.putpalette(_PROVENANCE_COLORS)
        pal.save(out_dir / f"{name}.provenance.png")
    (out_dir / "transforms.json").write_text(json.dumps(meta, indent=1))
    return RayDataset(out_dir), provenance


def distill(field: RadianceField, blended: RayDataset, iters: int,
            eval_mask: np.ndarray | None = None, eval_view: int = 0,
            log_points: int = 10, state: TrainState | None = None,
            callback=None, **kwargs) -> tuple[TrainState, list[dict]]:
    """Fine-tune the field on the blended dataset, tracking how the masked
    region approaches its targets and how still the background stays."""
    traj: list[dict] = []
    target = blended.pixels_float(eval_view)
    target_rgb = (target[:, :3] * target[:, 3:4] + (1.0 - target[:, 3:4])).reshape(
        blended.height, blended.width, 3)

    log_every = max(1, iters // max(log_points, 1))

    def measure(iteration: int):
        img = render_image(field, blended.poses[eval_view], blended.width,
                           blended.height, blended.focal, background=(1, 1, 1))
        err = (img["color"] - target_rgb) ** 2
        entry = {"iteration": iteration, "mse": float(err.mean())}
        if eval_mask is not None:
            entry["masked_mse"] = float(err[eval_mask].mean())
            entry["background_mse"] = float(err[~eval_mask].mean())
        traj.append(entry)

    def chained(iteration: int, loss: float):
        if iteration % log_every == 0:
            measure(iteration)
        if callback is not None:
            callback(iteration, loss)

    state = fine_tune(field, blended, iters, state=state, callback=chained, **kwargs)
    measure(state.iteration)
    return state, traj


# -- checkpointable fine-tuning (resume support) -------------------------------------


def save_distill_checkpoint(stem, field: RadianceField, state: TrainState) -> None:
    arrays = dict(field.state_arrays())
    arrays.update(state.optimizer.state_arrays())
    arrays["field_occupancy_bits"] = field.occupancy.bits.astype(np.float32)
    arrays["field_near_plane_mask"] = field.near_plane_mask.astype(np.float32)
    extras = {
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "lr": state.optimizer.lr,
        "avg_spr": state.avg_spr,
        "refresh_phase": field._refresh_phase,
    }
    save_fragments(stem, arrays, extras)


def load_distill_checkpoint(stem, field: RadianceField) -> TrainState:
    arrays, extras = load_fragments(stem)
    field.load_state_arrays(arrays)
    field.occupancy.bits = arrays["field_occupancy_bits"] > 0.5
    field.near_plane_mask = arrays["field_near_plane_mask"] > 0.5
    field._refresh_phase = int(extras["refresh_phase"])
    state = make_train_state(field, lr=extras["lr"])
    state.optimizer.load_state_arrays(arrays)
    state.iteration = int(extras["iteration"])
    state.avg_spr = extras["avg_spr"]
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = extras["rng_state"]
    return state
